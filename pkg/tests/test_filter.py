import math

import numpy as np
import pytest

from posefilter.geometry import CameraIntrinsics, OrganizedCloud, Pose, project
from posefilter.likelihood import BoundingBox
from posefilter.particle_filter import (
    EmptyPriorError,
    EstimateReport,
    FilterConfig,
    SampleSet,
    anneal_factor,
    depth_bounds,
    diffuse,
    init_samples,
    resample,
    run,
    run_scene,
    systematic_indices,
)
from posefilter.priors import DetectionPrior, gt_box_from_pose
from posefilter.synth import generate_scene, observe

K = CameraIntrinsics(64.0, 64.0, 31.5, 31.5, 64, 64)


def flat_obs(z=1.0):
    return OrganizedCloud.from_depth(np.full(K.shape, z), K)


@pytest.mark.parametrize("w,expected", [(0.0, 1.0), (0.5, 1.0), (0.6, 1.0), (0.7, (0.3 / 0.4) ** 5),
                                        (0.9, 0.0009765625), (1.0, 0.0)])
def test_anneal_values(w, expected):
    assert abs(anneal_factor(w) - expected) < 1e-12


def test_anneal_shape():
    ws = np.linspace(0, 1, 2001)
    lam = np.array([anneal_factor(w) for w in ws])
    assert np.all(lam[ws <= 0.6] == 1.0)
    assert np.all(np.diff(lam[ws >= 0.6]) < 0)
    assert np.max(np.abs(np.diff(lam))) < 0.02  # continuous at the knee


def test_init_single_box_projects_inside(rng):
    box = BoundingBox(10, 20, 30, 40, 1.0)
    s = init_samples([box], flat_obs(), FilterConfig(num_samples=2000), rng)
    for t in s.trans:
        u, v = project(K, t)
        assert box.u_min - 1e-9 <= u <= box.u_max + 1e-9 and box.v_min - 1e-9 <= v <= box.v_max + 1e-9


def test_init_depth_range_from_observation(rng):
    box = BoundingBox(10, 20, 30, 40, 1.0)
    s = init_samples([box], flat_obs(1.2), FilterConfig(num_samples=5000), rng, mesh_diameter=0.2)
    assert s.trans[:, 2].min() >= 1.0 and s.trans[:, 2].max() <= 1.4


def test_init_falls_back_to_workspace_without_depth(rng):
    box = BoundingBox(10, 20, 30, 40, 1.0)
    assert depth_bounds(box, OrganizedCloud.empty(K), 0.1, (0.3, 2.5)) == (0.3, 2.5)


def test_init_box_shares_follow_confidence(rng):
    a, b = BoundingBox(0, 0, 10, 10, 0.9), BoundingBox(40, 40, 60, 60, 0.1)
    s = init_samples([a, b], flat_obs(), FilterConfig(num_samples=10_000), rng)
    share = np.mean(s.boxes[:, 0] == 0)
    assert abs(share - 0.9) < 0.02


def test_init_equal_confidences_uniform(rng):
    boxes = [BoundingBox(10 * i, 0, 10 * i + 5, 5, 0.5) for i in range(4)]
    s = init_samples(boxes, flat_obs(), FilterConfig(num_samples=8000), rng)
    counts = np.bincount((s.boxes[:, 0] // 10).astype(int), minlength=4)
    assert np.all(np.abs(counts - 2000) < 4 * math.sqrt(8000 * 0.25 * 0.75))


def test_init_empty_prior(rng):
    with pytest.raises(EmptyPriorError, match="no detections for class"):
        init_samples([], flat_obs(), FilterConfig(), rng, object_class="mug")


def test_systematic_hand_trace():
    # weights (0.75, 0.25) over 4 slots give multiplicities (3, 1) for every phase
    for seed in range(50):
        w = np.array([0.75, 0.25, 0.0, 0.0])
        idx, _ = systematic_indices(w, np.random.default_rng(seed))
        assert np.bincount(idx, minlength=4).tolist() == [3, 1, 0, 0]


def test_systematic_uniform_weights(rng):
    idx, degenerate = systematic_indices(np.ones(100), rng)
    counts = np.bincount(idx, minlength=100)
    assert set(counts.tolist()) <= {0, 1, 2} and not degenerate


def test_resample_keeps_only_positive_weights(rng):
    n = 50
    s = SampleSet(np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros((n, 3)), np.tile([0, 0, 5, 5.0], (n, 1)),
                  np.ones(n))
    s.terms[:, 5] = np.where(np.arange(n) % 3 == 0, rng.uniform(0.1, 1, n), 0.0)
    out, degenerate = resample(s, rng)
    assert not degenerate and np.all(out.weights > 0)
    s.terms[:, 5] = 0.0
    _, degenerate = resample(s, rng)
    assert degenerate


def samples_at(n, box=(0, 0, 10, 10)):
    return SampleSet(np.tile([1.0, 0, 0, 0], (n, 1)), np.tile([0, 0, 1.0], (n, 1)),
                     np.tile(np.array(box, dtype=float), (n, 1)), np.ones(n))


def test_diffuse_zero_is_identity(rng):
    s = samples_at(10)
    out = diffuse(s, 0.0, FilterConfig(), (64, 64), rng)
    assert np.array_equal(out.trans, s.trans) and np.array_equal(out.quats, s.quats)
    assert np.array_equal(out.boxes, s.boxes)


def test_diffuse_translation_std(rng):
    out = diffuse(samples_at(100_000), 1.0, FilterConfig(), (64, 64), rng)
    std = (out.trans - [0, 0, 1.0]).std(axis=0)
    assert np.all(np.abs(std - 0.07) < 0.002)


def test_diffused_corner_box_stays_valid(rng):
    out = diffuse(samples_at(2000, (-20, -20, 2, 2)), 1.0, FilterConfig(), (64, 64), rng)
    for row in out.boxes:
        b = BoundingBox(*row)
        assert b.intersects_image(64, 64)
        assert math.isclose(b.u_max - b.u_min, 22.0)


@pytest.fixture(scope="module")
def scene():
    sc = generate_scene(["soup_can"], seed=3)
    obs = observe(sc)
    o = sc.objects[0]
    return sc, obs, o, gt_box_from_pose(o.mesh, o.pose, sc.intrinsics)


def test_zero_iterations(scene):
    sc, obs, o, box = scene
    rep = run(o.name, o.mesh, [box], obs, FilterConfig(num_samples=32, max_iterations=0))
    assert rep.iterations_run == 0 and len(rep.weight_trace) == 1
    assert rep.best_weight == rep.weight_trace[0]
    assert rep.converged == (rep.best_weight >= 0.9)


def test_report_invariants_and_round_trip(scene):
    sc, obs, o, box = scene
    cfg = FilterConfig(num_samples=48, max_iterations=15, rng_seed=4)
    rep = run(o.name, o.mesh, [box], obs, cfg)
    assert rep.iterations_run <= 15
    assert rep.best_weight >= max(rep.weight_trace) - 1e-15
    assert rep.converged == (rep.best_weight >= cfg.convergence_threshold)
    assert rep.present == (rep.best_weight >= cfg.presence_threshold)
    assert rep.breakdown.total == rep.best_weight
    back = EstimateReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()


def test_run_deterministic_across_workers(scene):
    sc, obs, o, box = scene
    cfg = FilterConfig(num_samples=40, max_iterations=8, rng_seed=11)
    a = run(o.name, o.mesh, [box], obs, cfg, workers=1).to_dict()
    b = run(o.name, o.mesh, [box], obs, cfg, workers=3).to_dict()
    assert a == b


def test_empty_table_prior_is_not_present(scene):
    sc, obs, o, box = scene
    k = sc.intrinsics
    # a box on bare table far from the object
    u = 10.0 if box.center[0] > k.width / 2 else k.width - 25.0
    far = BoundingBox(u, 70.0, u + 14.0, 84.0, 1.0)
    cfg = FilterConfig(num_samples=64, max_iterations=30, rng_seed=2)
    rep = run("gelatin_box", o.mesh, [far], obs, cfg)
    assert not rep.converged


def test_run_scene_isolates_failures(scene):
    sc, obs, o, box = scene
    prior = DetectionPrior(sc.intrinsics.width, sc.intrinsics.height, {o.name: [box], "other": []})
    cfg = FilterConfig(num_samples=16, max_iterations=2)
    reps = run_scene([o.name, "other"], {o.name: o.mesh, "other": o.mesh}, prior, obs, cfg)
    assert not reps[0].failed
    assert reps[1].failed and "no detections for class" in reps[1].error
    with pytest.raises(ValueError):
        run_scene(["a", "a"], {}, prior, obs, cfg)


def test_config_round_trip():
    cfg = FilterConfig(render_size=(48, 48), rng_seed=9)
    assert FilterConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FilterConfig(anneal_knee=1.0)
    with pytest.raises(ValueError):
        FilterConfig(num_samples=0)


def test_render_size_runs_on_coarser_grid(scene):
    sc, obs, o, box = scene
    rep = run(o.name, o.mesh, [box], obs, FilterConfig(num_samples=16, max_iterations=3, render_size=(48, 48)))
    # boxes are reported back on the observation grid
    assert rep.best_box.intersects_image(sc.intrinsics.width, sc.intrinsics.height)
    assert isinstance(rep.best_pose, Pose)
