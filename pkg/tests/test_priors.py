import json

import numpy as np
import pytest

from posefilter.geometry import CameraIntrinsics, Pose, Rotation
from posefilter.likelihood import BoundingBox
from posefilter.priors import (
    CorruptionSpec,
    DetectionPrior,
    PriorError,
    gt_box_from_pose,
    load_prior,
    parse_prior,
    preset,
    save_prior,
    synth_prior,
)
from posefilter.synth import make_primitive

CUBE = make_primitive("box", (1.0, 1.0, 1.0))
K = CameraIntrinsics(64.0, 64.0, 32.0, 32.0, 64, 64)


def write(tmp_path, data):
    p = tmp_path / "prior.json"
    p.write_text(json.dumps(data))
    return p


def test_load_well_formed(tmp_path):
    data = {"width": 64, "height": 48, "extra": 1, "detections": {
        "a": [{"box": [1, 2, 10, 20], "confidence": 0.5}, {"box": [5, 5, 9, 9], "confidence": 0.1}],
        "b": [{"box": [0, 0, 63, 47], "confidence": 1.0, "scale": 2}]}}
    prior = load_prior(write(tmp_path, data))
    assert len(prior.boxes("a")) == 2 and len(prior.boxes("b")) == 1
    assert prior.boxes("a")[0] == BoundingBox(1, 2, 10, 20, 0.5)
    assert prior.boxes("missing") == []


def test_inverted_box_is_named(tmp_path):
    data = {"width": 64, "height": 48, "detections": {"a": [{"box": [10, 2, 1, 20], "confidence": 0.5}]}}
    with pytest.raises(PriorError, match=r"detections\['a'\]\[0\]"):
        load_prior(write(tmp_path, data))


def test_confidence_clamped_with_warning(tmp_path):
    data = {"width": 64, "height": 48, "detections": {"a": [{"box": [1, 2, 10, 20], "confidence": 1.3}]}}
    prior = load_prior(write(tmp_path, data))
    assert prior.boxes("a")[0].confidence == 1.0
    assert prior.warnings and "clamped" in prior.warnings[0]


def test_boxes_clipped_and_outside_rejected(tmp_path):
    prior = parse_prior({"width": 64, "height": 48,
                         "detections": {"a": [{"box": [-5, -5, 80, 30], "confidence": 1}]}})
    b = prior.boxes("a")[0]
    assert (b.u_min, b.v_min, b.u_max, b.v_max) == (0, 0, 63, 30)
    with pytest.raises(PriorError, match="does not intersect"):
        parse_prior({"width": 64, "height": 48,
                     "detections": {"a": [{"box": [70, 5, 80, 30], "confidence": 1}]}})


def test_syntax_error_has_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"width": 64,\n "height": }')
    with pytest.raises(PriorError, match=r"bad.json:2:"):
        load_prior(p)


def test_round_trip(tmp_path, rng):
    prior = DetectionPrior(64, 48, {"x": [BoundingBox(1.5, 2.25, 9.0, 30.0, 0.3)], "y": []})
    save_prior(prior, tmp_path / "p.json")
    assert load_prior(tmp_path / "p.json") == prior


def test_gt_box_of_centered_cube_is_symmetric():
    box = gt_box_from_pose(CUBE, Pose(translation=(0, 0, 2.0)), K)
    # corners at z = 1.5 project to 32 +- 64 * 0.5 / 1.5
    assert box.u_min == pytest.approx(32 - 64 / 3) and box.u_max == pytest.approx(32 + 64 / 3)
    assert box.center == pytest.approx((32.0, 32.0))
    assert box.confidence == 1.0


def test_gt_box_errors_and_monotone():
    with pytest.raises(PriorError, match="object out of view"):
        gt_box_from_pose(CUBE, Pose(translation=(0, 0, -3.0)), K)
    prev = None
    for x in np.linspace(-0.5, 0.5, 6):
        b = gt_box_from_pose(CUBE, Pose(Rotation.from_axis_angle([0, 1, 0], 0.3), (x, 0, 3.0)), K)
        if prev is not None:
            assert b.u_min > prev.u_min and b.u_max > prev.u_max
        prev = b


GT = {"a": BoundingBox(10, 10, 30, 30), "b": BoundingBox(40, 5, 60, 25)}


def test_zero_spec_is_identity(rng):
    prior = synth_prior(GT, CorruptionSpec(), rng, 64, 64)
    for cls, box in GT.items():
        assert prior.boxes(cls) == [box]


def test_total_dropout_leaves_only_false_positives(rng):
    prior = synth_prior({"a": GT["a"]}, CorruptionSpec(drop_prob=1.0, false_positives=5), rng, 64, 64)
    boxes = prior.boxes("a")
    assert len(boxes) == 5
    assert all(0.5 <= b.confidence <= 0.9 for b in boxes)


def test_center_jitter_std(rng):
    spec = CorruptionSpec(center_jitter=4.0)
    centers = np.array([synth_prior({"a": BoundingBox(200, 200, 220, 220)}, spec, rng, 500, 500)
                        .boxes("a")[0].center for _ in range(10_000)])
    std = centers.std(axis=0)
    assert np.all(np.abs(std - 4.0) < 0.2)


def test_adversarial_preset_shape(rng):
    prior = synth_prior({"a": GT["a"]}, preset("adversarial"), rng, 64, 64)
    confs = sorted(b.confidence for b in prior.boxes("a"))
    assert confs == [0.3, 0.8]


def test_decoy_overlaps_true_location(rng):
    spec = preset("dropout", drop_prob=1.0)
    prior = synth_prior({"a": GT["a"]}, spec, rng, 64, 64)
    (decoy,) = prior.boxes("a")
    assert decoy.confidence == 0.2
    assert decoy.u_min < GT["a"].u_max and decoy.u_max > GT["a"].u_min


def test_same_seed_same_prior():
    a = synth_prior(GT, preset("falsepos"), np.random.default_rng(5), 64, 64)
    b = synth_prior(GT, preset("falsepos"), np.random.default_rng(5), 64, 64)
    assert a == b


def test_emitted_boxes_always_valid(rng):
    for name in ("jitter", "falsepos", "dark", "adversarial", "dropout"):
        for _ in range(100):
            prior = synth_prior(GT, preset(name), rng, 64, 64)
            for boxes in prior.detections.values():
                for b in boxes:
                    assert b.intersects_image(64, 64) and 0 <= b.confidence <= 1
                    assert 0 <= b.u_min and b.u_max <= 63


def test_invalid_spec():
    with pytest.raises(PriorError):
        CorruptionSpec(drop_prob=1.5)
    with pytest.raises(PriorError):
        preset("nonsense")
