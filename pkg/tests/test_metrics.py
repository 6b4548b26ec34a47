import math

import numpy as np
import pytest

from oracles import add_loop, adds_loop, fine_auc
from posefilter.geometry import Pose, Rotation, TriangleMesh, sample_uniform_rotation
from posefilter.metrics import accuracy_curve, add_error, adds_error, nearest_indices, object_error, pose_error
from posefilter.synth import make_primitive


def random_pose(rng):
    return Pose(sample_uniform_rotation(rng), tuple(rng.normal(scale=0.3, size=3)))


def test_identity_and_shift(rng):
    m = make_primitive("lshape", (0.12, 0.10, 0.08, 0.03))
    p = random_pose(rng)
    assert add_error(m, p, p) == 0 and adds_error(m, p, p) == 0
    d = np.array([0.003, -0.004, 0.0])
    shifted = Pose(p.rotation, tuple(p.t + d))
    assert add_error(m, p, shifted) == pytest.approx(0.005, abs=1e-15)


def test_against_loop_oracles(rng):
    m = TriangleMesh(rng.normal(size=(50, 3)) * 0.1, np.array([[0, 1, 2]]))
    for _ in range(10):
        a, b = random_pose(rng), random_pose(rng)
        args = (m.vertices, a.rotation.matrix(), a.t, b.rotation.matrix(), b.t)
        assert abs(add_error(m, a, b) - add_loop(*args)) < 1e-12
        assert abs(adds_error(m, a, b) - adds_loop(*args)) < 1e-12


def test_kdtree_and_brute_force_agree(rng):
    m = make_primitive("cylinder", (0.07, 0.19), tessellation=600)
    assert len(m.vertices) > 1000
    a, b = random_pose(rng), random_pose(rng)
    assert adds_error(m, a, b, brute_force=True) == adds_error(m, a, b, brute_force=False)
    q, r = rng.normal(size=(300, 3)), rng.normal(size=(400, 3))
    assert np.array_equal(nearest_indices(q, r, True), nearest_indices(q, r, False))


def test_cylinder_spin_symmetry():
    m = make_primitive("cylinder", (0.066, 0.10), tessellation=24)
    gt = Pose(translation=(0, 0, 0.5))
    spun = Pose(Rotation.from_axis_angle([0, 0, 1], 2 * math.pi / 24), (0, 0, 0.5))
    spacing = 0.066 * math.sin(math.pi / 24)
    assert adds_error(m, gt, spun) < spacing
    assert add_error(m, gt, spun) > 0.005


def test_left_invariance(rng):
    m = make_primitive("box", (0.06, 0.16, 0.21))
    a, b, g = random_pose(rng), random_pose(rng), random_pose(rng)
    assert add_error(m, g @ a, g @ b) == pytest.approx(add_error(m, a, b), abs=1e-12)


def test_object_error_dispatch(rng):
    m = make_primitive("box", (0.06, 0.16, 0.21))
    a, b = random_pose(rng), random_pose(rng)
    e = pose_error(m, a, b)
    assert object_error(m, a, b, True) == e.add_s
    assert object_error(m, a, b, False) == e.add
    assert object_error(m, a, None, True) == math.inf


def test_curve_edge_cases():
    zero = accuracy_curve([0.0, 0.0])
    assert np.all(zero.accuracy[1:] == 1.0) and zero.auc > 0.99
    big = accuracy_curve([0.05, 0.1])
    assert np.all(big.accuracy == 0) and big.auc == 0
    with pytest.raises(ValueError):
        accuracy_curve([])
    with pytest.raises(ValueError):
        accuracy_curve([0.01], steps=1)


def test_two_error_auc():
    c = accuracy_curve([0.01, 0.03])
    assert abs(c.auc - fine_auc([0.01, 0.03])) < 0.005
    assert c.auc == pytest.approx(0.5, abs=0.005)


def test_curve_monotone(rng):
    c = accuracy_curve(rng.uniform(0, 0.05, 30))
    assert np.all(np.diff(c.accuracy) >= 0) and 0 <= c.auc <= 1
