"""Iterated likelihood weighting over (pose, box) hypotheses.

The observation is fixed; each iteration scores every sample, resamples with
replacement in proportion to weight, and diffuses poses with Gaussian noise
whose scale shrinks as the best weight approaches 1. Boxes take a uniform
local jitter. The highest-weight hypothesis ever scored is reported.

Randomness for iteration t of class c comes from a Philox stream keyed by
(seed, crc32(c), t), so results do not depend on worker scheduling or on the
order in which classes are processed.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .features import FeatureParams
from .geometry import (
    CameraIntrinsics,
    OrganizedCloud,
    Pose,
    Rotation,
    TriangleMesh,
    perturb_quats,
    quat_to_matrix,
    uniform_quats,
)
from .likelihood import (
    BoundingBox,
    LikelihoodWeights,
    Observation,
    Scorer,
    TermBreakdown,
)

logger = logging.getLogger(__name__)

ANNEAL_KNEE = 0.6
ANNEAL_POWER = 5


class EmptyPriorError(ValueError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    num_samples: int = 625
    max_iterations: int = 400
    convergence_threshold: float = 0.9
    sigma_t0: float = 0.07
    sigma_r0: float = 0.3
    anneal_knee: float = ANNEAL_KNEE
    anneal_power: float = ANNEAL_POWER
    epsilon: float = 0.005
    weights: LikelihoodWeights = LikelihoodWeights()
    features: FeatureParams = FeatureParams()
    rng_seed: int = 0
    workspace_z: tuple[float, float] = (0.3, 2.5)
    presence_threshold: float = 0.5
    box_jitter: float = 0.1
    pixel_window: int = 1
    feature_context: bool = True
    render_size: tuple[int, int] | None = None
    guard_band: float = 0.5

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0 < self.anneal_knee < 1:
            raise ValueError("anneal_knee must lie in (0, 1)")
        for name in ("convergence_threshold", "presence_threshold"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.sigma_t0 < 0 or self.sigma_r0 < 0 or self.epsilon <= 0:
            raise ValueError("sigmas must be >= 0 and epsilon > 0")
        lo, hi = self.workspace_z
        if not 0 < lo < hi:
            raise ValueError("workspace_z must be (near, far) with 0 < near < far")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["workspace_z"] = list(self.workspace_z)
        d["render_size"] = list(self.render_size) if self.render_size else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FilterConfig:
        d = dict(d)
        d["weights"] = LikelihoodWeights(**d["weights"])
        d["features"] = FeatureParams(**d["features"])
        d["workspace_z"] = tuple(d["workspace_z"])
        if d.get("render_size") is not None:
            d["render_size"] = tuple(d["render_size"])
        return cls(**d)


@dataclass(eq=False)
class SampleSet:
    """Weighted hypotheses as parallel arrays.

    quats (N, 4) scalar-first; trans (N, 3); boxes (N, 4) as
    [u_min, v_min, u_max, v_max]; confidences (N,); terms (N, 6) rows of
    [w_box, I_b, I_r, I_e, I_p, total] (zeros until scored).
    """

    quats: np.ndarray
    trans: np.ndarray
    boxes: np.ndarray
    confidences: np.ndarray
    terms: np.ndarray = None

    def __post_init__(self):
        if self.terms is None:
            self.terms = np.zeros((len(self.quats), 6))

    def __len__(self):
        return len(self.quats)

    @property
    def weights(self) -> np.ndarray:
        return self.terms[:, 5]

    def take(self, idx) -> SampleSet:
        return SampleSet(self.quats[idx], self.trans[idx], self.boxes[idx],
                         self.confidences[idx], self.terms[idx])

    def copy(self) -> SampleSet:
        return self.take(np.arange(len(self)))

    def pose(self, i: int) -> Pose:
        return Pose(Rotation.from_quat(self.quats[i]), tuple(self.trans[i]))

    def box(self, i: int) -> BoundingBox:
        return BoundingBox(*self.boxes[i], confidence=float(self.confidences[i]))

    def hypotheses(self) -> list[Hypothesis]:
        return [Hypothesis(self.pose(i), self.box(i), float(self.terms[i, 5]),
                           TermBreakdown.from_row(self.terms[i])) for i in range(len(self))]


@dataclass(frozen=True)
class Hypothesis:
    pose: Pose
    box: BoundingBox
    weight: float
    breakdown: TermBreakdown


@dataclass(eq=False)
class EstimateReport:
    object_class: str
    best_pose: Pose | None
    best_box: BoundingBox | None
    best_weight: float
    breakdown: TermBreakdown | None
    iterations_run: int
    converged: bool
    present: bool
    weight_trace: list[float] = field(default_factory=list)
    degenerate_iterations: int = 0
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @classmethod
    def failure(cls, object_class: str, message: str) -> EstimateReport:
        return cls(object_class, None, None, 0.0, None, 0, False, False, [], 0, message)

    def to_dict(self) -> dict:
        b = self.best_box
        return {
            "object_class": self.object_class,
            "best_pose": self.best_pose.to_dict() if self.best_pose else None,
            "best_box": ({"box": [b.u_min, b.v_min, b.u_max, b.v_max], "confidence": b.confidence}
                         if b else None),
            "best_weight": self.best_weight,
            "breakdown": self.breakdown.to_dict() if self.breakdown else None,
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "present": self.present,
            "weight_trace": list(self.weight_trace),
            "degenerate_iterations": self.degenerate_iterations,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EstimateReport:
        box = d.get("best_box")
        return cls(
            d["object_class"],
            Pose.from_dict(d["best_pose"]) if d.get("best_pose") else None,
            BoundingBox(*box["box"], confidence=box["confidence"]) if box else None,
            float(d["best_weight"]),
            TermBreakdown.from_dict(d["breakdown"]) if d.get("breakdown") else None,
            int(d["iterations_run"]),
            bool(d["converged"]),
            bool(d["present"]),
            [float(w) for w in d.get("weight_trace", [])],
            int(d.get("degenerate_iterations", 0)),
            d.get("error"),
        )


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

INIT_STREAM = -1


def stream(seed: int, object_class: str, iteration: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(object_class.encode("utf-8")), iteration + 1]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# ---------------------------------------------------------------------------
# filter steps
# ---------------------------------------------------------------------------

def anneal_factor(best_weight: float, knee: float = ANNEAL_KNEE, power: float = ANNEAL_POWER) -> float:
    """1 below the knee, then ((1 - W) / (1 - knee)) ** power down to 0 at W = 1."""
    w = min(max(float(best_weight), 0.0), 1.0)
    if w < knee:
        return 1.0
    return ((1.0 - w) / (1.0 - knee)) ** power


def depth_bounds(box: BoundingBox, obs: OrganizedCloud, margin: float,
                 workspace: tuple[float, float]) -> tuple[float, float]:
    """Observed depth range inside the box widened by margin, clipped to the workspace.

    Falls back to the full workspace when the box holds no valid depth.
    """
    lo_ws, hi_ws = workspace
    k = obs.intrinsics
    u0, u1 = int(np.ceil(max(box.u_min, 0))), int(np.floor(min(box.u_max, k.width - 1)))
    v0, v1 = int(np.ceil(max(box.v_min, 0))), int(np.floor(min(box.v_max, k.height - 1)))
    z = obs.depth[v0:v1 + 1, u0:u1 + 1]
    z = z[~np.isnan(z)]
    if z.size == 0:
        return lo_ws, hi_ws
    lo = max(lo_ws, float(z.min()) - margin)
    hi = min(hi_ws, float(z.max()) + margin)
    if lo >= hi:
        return lo_ws, hi_ws
    return lo, hi


def init_samples(boxes, obs: OrganizedCloud, config: FilterConfig, rng: np.random.Generator,
                 mesh_diameter: float = 0.0, object_class: str = "") -> SampleSet:
    """Draw boxes by confidence, then translations uniform in each box's frustum volume."""
    boxes = list(boxes)
    if not boxes:
        suffix = f" {object_class!r}" if object_class else ""
        raise EmptyPriorError("no detections for class" + suffix)
    n = config.num_samples
    conf = np.array([b.confidence for b in boxes], dtype=np.float64)
    p = conf / conf.sum() if conf.sum() > 0 else np.full(len(boxes), 1.0 / len(boxes))
    choice = rng.choice(len(boxes), size=n, p=p)
    ru, rv, rz = rng.random((3, n))
    quats = uniform_quats(rng, n)

    k = obs.intrinsics
    arr = np.array([b.as_array() for b in boxes])
    bounds = np.array([depth_bounds(b, obs, mesh_diameter, config.workspace_z) for b in boxes])
    sel_box = arr[choice]
    u = sel_box[:, 0] + ru * (sel_box[:, 2] - sel_box[:, 0])
    v = sel_box[:, 1] + rv * (sel_box[:, 3] - sel_box[:, 1])
    lo, hi = bounds[choice, 0], bounds[choice, 1]
    # uniform in frustum volume: density proportional to z^2
    z = np.cbrt(lo ** 3 + rz * (hi ** 3 - lo ** 3))
    trans = np.column_stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z])
    return SampleSet(quats, trans, sel_box.copy(), conf[choice].copy())


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Low-variance resampling indices; falls back to uniform weights when all are zero."""
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    total = w.sum()
    degenerate = not total > 0
    if degenerate:
        w = np.ones(n)
        total = float(n)
    cdf = np.cumsum(w / total)
    cdf[-1] = 1.0
    positions = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(cdf, positions, side="right")
    return np.minimum(idx, n - 1), degenerate


def resample(samples: SampleSet, rng: np.random.Generator) -> tuple[SampleSet, bool]:
    idx, degenerate = systematic_indices(samples.weights, rng)
    return samples.take(idx), degenerate


def diffuse(samples: SampleSet, lam: float, config: FilterConfig, image_size: tuple[int, int],
            rng: np.random.Generator) -> SampleSet:
    """Gaussian pose noise scaled by lam; box centers jittered uniformly, size kept."""
    n = len(samples)
    width, height = image_size
    dt = rng.standard_normal((n, 3))
    db = rng.uniform(-1.0, 1.0, size=(n, 2))
    if lam == 0:
        return samples.copy()
    trans = samples.trans + dt * (lam * config.sigma_t0)
    quats = perturb_quats(samples.quats, lam * config.sigma_r0, rng)

    boxes = samples.boxes.copy()
    half = 0.5 * (boxes[:, 2:] - boxes[:, :2])
    center = 0.5 * (boxes[:, 2:] + boxes[:, :2])
    center += db * (lam * config.box_jitter * np.array([width, height], dtype=np.float64))
    # keep the center on the image so the box always overlaps it
    center[:, 0] = np.clip(center[:, 0], 0.0, width - 1.0)
    center[:, 1] = np.clip(center[:, 1], 0.0, height - 1.0)
    boxes = np.concatenate([center - half, center + half], axis=1)
    return SampleSet(quats, trans, boxes, samples.confidences.copy())


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _box_to_grid(box: BoundingBox, src: CameraIntrinsics, dst: CameraIntrinsics) -> BoundingBox:
    if (src.width, src.height) == (dst.width, dst.height):
        return box
    sx, sy = dst.width / src.width, dst.height / src.height
    return BoundingBox((box.u_min + 0.5) * sx - 0.5, (box.v_min + 0.5) * sy - 0.5,
                       (box.u_max + 0.5) * sx - 0.5, (box.v_max + 0.5) * sy - 0.5, box.confidence)


def render_intrinsics(obs_intrinsics: CameraIntrinsics, config: FilterConfig) -> CameraIntrinsics:
    if config.render_size is None:
        return obs_intrinsics
    return obs_intrinsics.scaled(*config.render_size)


IterationCallback = Callable[[int, Pose, float], None]


def run(object_class: str, mesh: TriangleMesh, boxes, obs: OrganizedCloud,
        config: FilterConfig = FilterConfig(), workers: int = 1,
        observation: Observation | None = None,
        on_iteration: IterationCallback | None = None) -> EstimateReport:
    """Estimate one object's pose from its prior boxes.

    ``boxes`` is the class's list of BoundingBox (or a DetectionPrior).
    ``observation`` may carry a prepared Observation shared across classes.
    ``on_iteration(t, best_pose, best_weight)`` is called after every scoring pass.
    """
    if hasattr(boxes, "boxes"):
        boxes = boxes.boxes(object_class)
    rk = render_intrinsics(obs.intrinsics, config)
    if observation is None:
        observation = Observation.prepare(obs, config.features, rk)
    grid_boxes = [_box_to_grid(b, obs.intrinsics, rk) for b in boxes]

    samples = init_samples(grid_boxes, observation.cloud, config,
                           stream(config.rng_seed, object_class, INIT_STREAM),
                           mesh.diameter, object_class)
    with Scorer(mesh, observation, config.weights, config.epsilon, config.pixel_window,
                config.feature_context, workers, config.guard_band) as scorer:

        def score(s: SampleSet):
            s.terms = scorer.score(quat_to_matrix(s.quats), s.trans, s.boxes, s.confidences)

        score(samples)
        i = int(np.argmax(samples.weights))
        pop_best = float(samples.weights[i])
        best_weight, best = pop_best, samples.take([i])
        trace = [pop_best]
        if on_iteration:
            on_iteration(0, best.pose(0), best_weight)

        t = degenerate = 0
        while t < config.max_iterations and best_weight < config.convergence_threshold:
            t += 1
            rng = stream(config.rng_seed, object_class, t)
            lam = anneal_factor(pop_best, config.anneal_knee, config.anneal_power)
            samples, was_degenerate = resample(samples, rng)
            degenerate += was_degenerate
            samples = diffuse(samples, lam, config, (rk.width, rk.height), rng)
            score(samples)
            i = int(np.argmax(samples.weights))
            pop_best = float(samples.weights[i])
            trace.append(pop_best)
            if pop_best > best_weight:
                best_weight, best = pop_best, samples.take([i])
            if on_iteration:
                on_iteration(t, best.pose(0), best_weight)

    best_box = _box_to_grid(best.box(0), rk, obs.intrinsics)
    return EstimateReport(
        object_class=object_class,
        best_pose=best.pose(0),
        best_box=best_box,
        best_weight=best_weight,
        breakdown=TermBreakdown.from_row(best.terms[0]),
        iterations_run=t,
        converged=best_weight >= config.convergence_threshold,
        present=best_weight >= config.presence_threshold,
        weight_trace=trace,
        degenerate_iterations=int(degenerate),
    )


def run_scene(classes, meshes: dict[str, TriangleMesh], prior, obs: OrganizedCloud,
              config: FilterConfig = FilterConfig(), workers: int = 1) -> list[EstimateReport]:
    """Independent per-class runs; a failing class yields a failed report."""
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise ValueError("classes must be distinct")
    rk = render_intrinsics(obs.intrinsics, config)
    observation = Observation.prepare(obs, config.features, rk)
    reports = []
    for cls in classes:
        try:
            reports.append(run(cls, meshes[cls], prior.boxes(cls), obs, config, workers, observation))
        except Exception as exc:  # isolate per-class failures
            logger.warning("class %s failed: %s", cls, exc)
            reports.append(EstimateReport.failure(cls, str(exc)))
    return reports


def with_seed(config: FilterConfig, seed: int) -> FilterConfig:
    return replace(config, rng_seed=int(seed))
