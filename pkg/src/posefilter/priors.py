"""Detection priors: scored 2D boxes per class, read from files or synthesized.

File schema::

    {"width": int, "height": int,
     "detections": {"<class>": [{"box": [u_min, v_min, u_max, v_max],
                                  "confidence": float}, ...]}}

Unknown fields are ignored. Scores are never thresholded.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, TriangleMesh
from .likelihood import BoundingBox, LikelihoodError

logger = logging.getLogger(__name__)


class PriorError(ValueError):
    pass


@dataclass(eq=False)
class DetectionPrior:
    width: int
    height: int
    detections: dict[str, list[BoundingBox]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def boxes(self, object_class: str) -> list[BoundingBox]:
        return list(self.detections.get(object_class, []))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "detections": {
                cls: [{"box": [b.u_min, b.v_min, b.u_max, b.v_max], "confidence": b.confidence}
                      for b in boxes]
                for cls, boxes in sorted(self.detections.items())
            },
        }

    def __eq__(self, other):
        return isinstance(other, DetectionPrior) and self.to_dict() == other.to_dict()


def parse_prior(data: dict, source: str = "<prior>") -> DetectionPrior:
    try:
        width, height = int(data["width"]), int(data["height"])
        raw = data["detections"]
    except (KeyError, TypeError, ValueError) as exc:
        raise PriorError(f"{source}: missing or invalid width/height/detections ({exc})") from exc
    if width <= 0 or height <= 0:
        raise PriorError(f"{source}: width/height must be positive")
    if not isinstance(raw, dict):
        raise PriorError(f"{source}: detections must be an object keyed by class")
    prior = DetectionPrior(width, height)
    for cls, entries in raw.items():
        if not isinstance(entries, list):
            raise PriorError(f"{source}: detections[{cls!r}] must be a list")
        boxes = []
        for i, entry in enumerate(entries):
            where = f"{source}: detections[{cls!r}][{i}]"
            try:
                coords = [float(c) for c in entry["box"]]
                conf = float(entry["confidence"])
            except (KeyError, TypeError, ValueError) as exc:
                raise PriorError(f"{where}: needs 'box' [4 numbers] and 'confidence' ({exc})") from exc
            if len(coords) != 4:
                raise PriorError(f"{where}: box must have 4 coordinates, got {len(coords)}")
            if not 0.0 <= conf <= 1.0:
                clamped = min(max(conf, 0.0), 1.0)
                msg = f"{where}: confidence {conf} clamped to {clamped}"
                logger.warning(msg)
                prior.warnings.append(msg)
                conf = clamped
            try:
                box = BoundingBox(*coords, confidence=conf)
            except LikelihoodError as exc:
                raise PriorError(f"{where}: {exc}") from exc
            if not box.intersects_image(width, height):
                raise PriorError(f"{where}: box {coords} does not intersect the image")
            boxes.append(box.clipped(width, height))
        prior.detections[str(cls)] = boxes
    return prior


def load_prior(path) -> DetectionPrior:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PriorError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_prior(data, str(path))


def save_prior(prior: DetectionPrior, path) -> None:
    Path(path).write_text(json.dumps(prior.to_dict(), indent=2, sort_keys=True) + "\n")


def gt_box_from_pose(mesh: TriangleMesh, pose: Pose, intrinsics: CameraIntrinsics) -> BoundingBox:
    """Axis-aligned box around the projections of all vertices in front of the camera.

    The box is not clipped; it only has to overlap the image.
    """
    cam = pose.apply(mesh.vertices)
    front = cam[:, 2] >= intrinsics.z_near
    if not front.any():
        raise PriorError("object out of view")
    cam = cam[front]
    u = intrinsics.fx * cam[:, 0] / cam[:, 2] + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / cam[:, 2] + intrinsics.cy
    inside = (u >= -0.5) & (u < intrinsics.width - 0.5) & (v >= -0.5) & (v < intrinsics.height - 0.5)
    if not inside.any():
        raise PriorError("object out of view")
    return BoundingBox(float(u.min()), float(v.min()), float(u.max()), float(v.max()), 1.0)


@dataclass(frozen=True)
class CorruptionSpec:
    """Detector failure model applied to ground-truth boxes.

    Center jitter std is ``center_jitter + center_jitter_frac * box side`` per
    axis. Decoys are spurious boxes overlapping a true object's location,
    emitted even when the true box itself is dropped.
    """

    center_jitter: float = 0.0
    center_jitter_frac: float = 0.0
    scale_jitter: float = 0.0
    drop_prob: float = 0.0
    false_positives: int = 0
    fp_confidence: tuple[float, float] = (0.5, 0.9)
    confidence_noise: float = 0.0
    true_confidence: float | None = None
    decoys: int = 0
    decoy_confidence: float = 0.2
    decoy_shift: float = 0.5

    def __post_init__(self):
        sigmas = (self.center_jitter, self.center_jitter_frac, self.scale_jitter,
                  self.confidence_noise, self.decoy_shift)
        if any(s < 0 for s in sigmas):
            raise PriorError("jitter and noise sigmas must be >= 0")
        probs = [self.drop_prob, self.decoy_confidence, *self.fp_confidence]
        if self.true_confidence is not None:
            probs.append(self.true_confidence)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise PriorError("probabilities and confidences must lie in [0, 1]")
        if self.fp_confidence[0] > self.fp_confidence[1]:
            raise PriorError("fp_confidence must be (low, high)")
        if self.false_positives < 0 or self.decoys < 0:
            raise PriorError("counts must be >= 0")


PRESETS = {
    "clean": CorruptionSpec(),
    "jitter": CorruptionSpec(center_jitter_frac=0.15, scale_jitter=0.1, confidence_noise=0.1),
    "falsepos": CorruptionSpec(center_jitter_frac=0.05, false_positives=3, fp_confidence=(0.5, 0.9),
                               confidence_noise=0.1),
    "dropout": CorruptionSpec(drop_prob=0.5, decoys=1, decoy_confidence=0.2),
    "dark": CorruptionSpec(center_jitter_frac=0.15, scale_jitter=0.1, drop_prob=0.2,
                           false_positives=2, fp_confidence=(0.6, 0.9), true_confidence=0.3,
                           decoys=1, decoy_confidence=0.2),
    "adversarial": CorruptionSpec(center_jitter_frac=0.15, false_positives=1,
                                  fp_confidence=(0.8, 0.8), true_confidence=0.3),
}


def preset(name: str, **overrides) -> CorruptionSpec:
    if name not in PRESETS:
        raise PriorError(f"unknown corruption preset {name!r}; choose from {sorted(PRESETS)}")
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(PRESETS[name], **overrides)


def _clipped_or_none(u0, v0, u1, v1, conf, width, height):
    try:
        box = BoundingBox(u0, v0, u1, v1, conf)
    except LikelihoodError:
        return None
    if not box.intersects_image(width, height):
        return None
    return box.clipped(width, height)


def synth_prior(gt_boxes: dict[str, BoundingBox], spec: CorruptionSpec, rng: np.random.Generator,
                width: int, height: int) -> DetectionPrior:
    """Corrupt ground-truth boxes into an unthresholded detection prior.

    Classes are processed in sorted order so the draws do not depend on dict order.
    """
    prior = DetectionPrior(width, height)
    sizes = [b.size for b in gt_boxes.values()] or [(0.2 * width, 0.2 * height)]
    for cls in sorted(gt_boxes):
        gt = gt_boxes[cls]
        out = []
        (cu, cv), (bw, bh) = gt.center, gt.size
        r = rng.random(6)
        jitter = rng.standard_normal(2)
        scale = rng.standard_normal(2)
        conf_n = rng.standard_normal()
        if r[0] >= spec.drop_prob:
            su = spec.center_jitter + spec.center_jitter_frac * bw
            sv = spec.center_jitter + spec.center_jitter_frac * bh
            nu, nv = cu + su * jitter[0], cv + sv * jitter[1]
            nw = bw * max(0.2, 1.0 + spec.scale_jitter * scale[0])
            nh = bh * max(0.2, 1.0 + spec.scale_jitter * scale[1])
            if spec.true_confidence is not None:
                conf = spec.true_confidence
            else:
                conf = 1.0 - abs(spec.confidence_noise * conf_n)
            conf = min(max(conf, 0.0), 1.0)
            if su == sv == 0.0 and spec.scale_jitter == 0.0:
                corners = (gt.u_min, gt.v_min, gt.u_max, gt.v_max)  # exact, no center/size round trip
            else:
                corners = (nu - nw / 2, nv - nh / 2, nu + nw / 2, nv + nh / 2)
            box = _clipped_or_none(*corners, conf, width, height)
            if box is not None:
                out.append(box)
        for _ in range(spec.decoys):
            ang = rng.uniform(0, 2 * np.pi)
            du, dv = spec.decoy_shift * bw * np.cos(ang), spec.decoy_shift * bh * np.sin(ang)
            box = _clipped_or_none(cu + du - bw / 2, cv + dv - bh / 2, cu + du + bw / 2,
                                   cv + dv + bh / 2, spec.decoy_confidence, width, height)
            if box is not None:
                out.append(box)
        for _ in range(spec.false_positives):
            fw, fh = sizes[rng.integers(len(sizes))]
            fu, fv = rng.uniform(0, width - 1), rng.uniform(0, height - 1)
            conf = rng.uniform(*spec.fp_confidence)
            box = _clipped_or_none(fu - fw / 2, fv - fh / 2, fu + fw / 2, fv + fh / 2, conf, width, height)
            if box is not None:
                out.append(box)
        prior.detections[cls] = out
    return prior
