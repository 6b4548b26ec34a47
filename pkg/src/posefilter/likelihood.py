"""Hypothesis scoring: raw, in-box and feature inlier ratios combined linearly.

W(q) = a_box * w_box + a_b * I_b + a_r * I_r + a_e * I_e + a_p * I_p

The per-hypothesis hot path is a single nogil kernel (render, back-project,
count inliers, extract sample features, match against observation features)
so a batch of hypotheses can be spread over worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numba as nb
import numpy as np

from .features import (
    EDGE,
    PLANAR,
    FeatureCloud,
    FeatureParams,
    count_feature_inliers,
    extract_features,
    select_features,
    smoothness_map,
)
from .geometry import CameraIntrinsics, OrganizedCloud, Pose, TriangleMesh
from .renderer import rasterize, transform_vertices

DEFAULT_EPSILON = 0.005


class LikelihoodError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-center coordinates; a pixel (u, v) is inside iff u_min <= u <= u_max etc."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float
    confidence: float = 1.0

    def __post_init__(self):
        coords = (self.u_min, self.v_min, self.u_max, self.v_max, self.confidence)
        if not all(math.isfinite(c) for c in coords):
            raise LikelihoodError(f"non-finite box {coords}")
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise LikelihoodError(
                f"degenerate box [{self.u_min}, {self.v_min}, {self.u_max}, {self.v_max}]")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))

    @property
    def size(self) -> tuple[float, float]:
        return (self.u_max - self.u_min, self.v_max - self.v_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max])

    def contains(self, u: float, v: float) -> bool:
        return self.u_min <= u <= self.u_max and self.v_min <= v <= self.v_max

    def intersects_image(self, width: int, height: int) -> bool:
        # pixel centers span [0, width - 1] x [0, height - 1]
        return (self.u_max > 0 and self.u_min < width - 1
                and self.v_max > 0 and self.v_min < height - 1)

    def clipped(self, width: int, height: int) -> BoundingBox:
        return BoundingBox(max(self.u_min, 0.0), max(self.v_min, 0.0),
                           min(self.u_max, width - 1.0), min(self.v_max, height - 1.0),
                           self.confidence)

    def with_confidence(self, confidence: float) -> BoundingBox:
        return BoundingBox(self.u_min, self.v_min, self.u_max, self.v_max, confidence)


@dataclass(frozen=True)
class LikelihoodWeights:
    alpha_box: float = 0.1
    alpha_b: float = 0.1
    alpha_r: float = 0.3
    alpha_e: float = 0.25
    alpha_p: float = 0.25

    def __post_init__(self):
        a = self.as_array()
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise LikelihoodError("coefficients must be non-negative")
        if abs(a.sum() - 1.0) > 1e-9:
            raise LikelihoodError(f"coefficients must sum to 1 (got {a.sum():.12g})")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_box, self.alpha_b, self.alpha_r, self.alpha_e, self.alpha_p])

    @classmethod
    def parse(cls, text: str) -> LikelihoodWeights:
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 5:
            raise LikelihoodError("expected five comma-separated coefficients")
        return cls(*parts)


@dataclass(frozen=True)
class TermBreakdown:
    w_box: float
    I_b: float
    I_r: float
    I_e: float
    I_p: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TermBreakdown:
        return cls(**{k: float(d[k]) for k in ("w_box", "I_b", "I_r", "I_e", "I_p", "total")})

    @classmethod
    def from_row(cls, row) -> TermBreakdown:
        return cls(*(float(x) for x in row))


def combine(terms, alphas) -> float:
    """Weighted sum in a fixed order, clamped to [0, 1]."""
    total = alphas[0] * terms[0]
    for k in range(1, 5):
        total += alphas[k] * terms[k]
    return min(max(total, 0.0), 1.0)


_combine_nb = nb.njit(cache=True, nogil=True)(combine)


def inlier(p, p_prime, epsilon: float = DEFAULT_EPSILON) -> int:
    if epsilon <= 0:
        raise LikelihoodError("epsilon must be positive")
    d = np.asarray(p, dtype=np.float64) - np.asarray(p_prime, dtype=np.float64)
    return int(math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) < epsilon)


def _inlier_mask(rendered: OrganizedCloud, observed: OrganizedCloud, epsilon: float):
    if rendered.points.shape != observed.points.shape:
        raise LikelihoodError(
            f"grid mismatch: rendered {rendered.points.shape[:2]} vs observed {observed.points.shape[:2]}")
    if epsilon <= 0:
        raise LikelihoodError("epsilon must be positive")
    d = rendered.points - observed.points
    dist = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])
    # NaN distances (observation absent) compare False: counted as outliers
    return rendered.valid, np.less(dist, epsilon, where=rendered.valid & observed.valid,
                                   out=np.zeros(dist.shape, dtype=bool))


def inlier_ratio(rendered: OrganizedCloud, observed: OrganizedCloud,
                 epsilon: float = DEFAULT_EPSILON) -> float:
    present, hit = _inlier_mask(rendered, observed, epsilon)
    n = int(present.sum())
    return int(hit.sum()) / n if n else 0.0


def box_mask(box: BoundingBox, width: int, height: int) -> np.ndarray:
    u = np.arange(width)
    v = np.arange(height)
    return (((u >= box.u_min) & (u <= box.u_max))[None, :]
            & ((v >= box.v_min) & (v <= box.v_max))[:, None])


def bbox_inlier_ratio(rendered: OrganizedCloud, observed: OrganizedCloud, box: BoundingBox,
                      epsilon: float = DEFAULT_EPSILON) -> float:
    present, hit = _inlier_mask(rendered, observed, epsilon)
    inside = box_mask(box, rendered.width, rendered.height)
    n = int((present & inside).sum())
    return int((hit & inside).sum()) / n if n else 0.0


def feature_inlier_ratio(rendered_features: FeatureCloud, observed_features: FeatureCloud,
                         epsilon: float = DEFAULT_EPSILON, pixel_window: int = 1,
                         empty_value: float = 1.0) -> tuple[float, float]:
    """(I_e, I_p); a kind with no rendered features scores ``empty_value``."""
    if epsilon <= 0 or pixel_window < 0:
        raise LikelihoodError("need epsilon > 0 and pixel_window >= 0")
    r_lab, o_lab = rendered_features.labels, observed_features.labels
    if r_lab.shape != o_lab.shape:
        raise LikelihoodError("feature grids differ in size")
    rect = np.array([0, 0, r_lab.shape[1] - 1, r_lab.shape[0] - 1], dtype=np.int64)
    out = []
    for kind in (EDGE, PLANAR):
        hits, total = count_feature_inliers(
            rendered_features.cloud.points, r_lab, observed_features.cloud.points, o_lab,
            kind, epsilon, pixel_window, rect)
        out.append(hits / total if total else empty_value)
    return out[0], out[1]


@nb.njit(cache=True, nogil=True)
def score_pose(verts, tris, rot, trans, box, w_box,
               fx, fy, cx, cy, z_near, z_far,
               obs_pts, obs_labels, eps, pixel_window,
               radius, log_thr, window, max_e, max_p, use_ctx, alphas,
               zbuf, rpts, cmap, rlabels, rect, out):
    """Score one hypothesis into out = [w_box, I_b, I_r, I_e, I_p, total].

    Scratch buffers (zbuf=inf, rpts/cmap=NaN, rlabels=0) are restored on exit.
    """
    height, width = zbuf.shape
    cam = transform_vertices(verts, rot, trans)
    rect[0] = width
    rect[1] = height
    rect[2] = -1
    rect[3] = -1
    rasterize(zbuf, cam, tris, fx, fy, cx, cy, z_near, z_far, rect)
    out[0] = w_box
    if rect[2] < 0:
        out[1] = 0.0
        out[2] = 0.0
        out[3] = 0.0
        out[4] = 0.0
        out[5] = _combine_nb(out, alphas)
        return

    n_r = 0
    hit_r = 0
    n_b = 0
    hit_b = 0
    for v in range(rect[1], rect[3] + 1):
        for u in range(rect[0], rect[2] + 1):
            z = zbuf[v, u]
            if z == np.inf:
                continue
            x = (u - cx) / fx * z
            y = (v - cy) / fy * z
            rpts[v, u, 0] = x
            rpts[v, u, 1] = y
            rpts[v, u, 2] = z
            n_r += 1
            ok = False
            if not math.isnan(obs_pts[v, u, 2]):
                dx = x - obs_pts[v, u, 0]
                dy = y - obs_pts[v, u, 1]
                dz = z - obs_pts[v, u, 2]
                ok = math.sqrt(dx * dx + dy * dy + dz * dz) < eps
            if ok:
                hit_r += 1
            if box[0] <= u <= box[2] and box[1] <= v <= box[3]:
                n_b += 1
                if ok:
                    hit_b += 1
    out[1] = hit_b / n_b if n_b > 0 else 0.0
    out[2] = hit_r / n_r

    smoothness_map(rpts, obs_pts, use_ctx, radius, rect, cmap)
    select_features(cmap, log_thr, window, max_e, max_p, rect, rlabels)
    he, te = count_feature_inliers(rpts, rlabels, obs_pts, obs_labels, 1, eps, pixel_window, rect)
    hp, tp = count_feature_inliers(rpts, rlabels, obs_pts, obs_labels, 2, eps, pixel_window, rect)
    # a kind the sample does not exhibit defers to the raw inlier ratio
    out[3] = he / te if te > 0 else out[2]
    out[4] = hp / tp if tp > 0 else out[2]
    out[5] = _combine_nb(out, alphas)

    for v in range(rect[1], rect[3] + 1):
        for u in range(rect[0], rect[2] + 1):
            zbuf[v, u] = np.inf
            rpts[v, u, 0] = np.nan
            rpts[v, u, 1] = np.nan
            rpts[v, u, 2] = np.nan
            cmap[v, u] = np.nan
            rlabels[v, u] = 0


@nb.njit(cache=True, nogil=True)
def score_range(lo, hi, verts, tris, rots, trans, boxes, confs,
                fx, fy, cx, cy, z_near, z_far,
                obs_pts, obs_labels, eps, pixel_window,
                radius, log_thr, window, max_e, max_p, use_ctx, alphas,
                zbuf, rpts, cmap, rlabels, rect, out):
    for i in range(lo, hi):
        score_pose(verts, tris, rots[i], trans[i], boxes[i], confs[i],
                   fx, fy, cx, cy, z_near, z_far,
                   obs_pts, obs_labels, eps, pixel_window,
                   radius, log_thr, window, max_e, max_p, use_ctx, alphas,
                   zbuf, rpts, cmap, rlabels, rect, out[i])


def downsample_cloud(cloud: OrganizedCloud, target: CameraIntrinsics) -> OrganizedCloud:
    """Nearest-pixel resampling of an observation onto a coarser render grid."""
    src = cloud.intrinsics
    if (target.width, target.height) == (src.width, src.height):
        return cloud
    us = np.clip(np.rint((np.arange(target.width) + 0.5) * src.width / target.width - 0.5),
                 0, src.width - 1).astype(int)
    vs = np.clip(np.rint((np.arange(target.height) + 0.5) * src.height / target.height - 0.5),
                 0, src.height - 1).astype(int)
    return OrganizedCloud(cloud.points[np.ix_(vs, us)], target)


@dataclass(frozen=True, eq=False)
class Observation:
    """Scene cloud and its features, prepared once per run at render resolution."""

    cloud: OrganizedCloud
    features: FeatureCloud
    params: FeatureParams

    @classmethod
    def prepare(cls, cloud: OrganizedCloud, params: FeatureParams = FeatureParams(),
                render_intrinsics: CameraIntrinsics | None = None) -> Observation:
        if render_intrinsics is not None:
            cloud = downsample_cloud(cloud, render_intrinsics)
        return cls(cloud, extract_features(cloud, params), params)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.cloud.intrinsics


class _Scratch:
    def __init__(self, shape):
        h, w = shape
        self.zbuf = np.full((h, w), np.inf)
        self.rpts = np.full((h, w, 3), np.nan)
        self.cmap = np.full((h, w), np.nan)
        self.rlabels = np.zeros((h, w), dtype=np.int8)
        self.rect = np.empty(4, dtype=np.int64)


def pad_grid(intrinsics: CameraIntrinsics, margin: int) -> CameraIntrinsics:
    """The same camera with ``margin`` extra pixels on every side."""
    k = intrinsics
    return CameraIntrinsics(k.fx, k.fy, k.cx + margin, k.cy + margin,
                            k.width + 2 * margin, k.height + 2 * margin, k.z_near, k.z_far)


def pad_array(a: np.ndarray, margin: int, fill) -> np.ndarray:
    out = np.full((a.shape[0] + 2 * margin, a.shape[1] + 2 * margin) + a.shape[2:], fill,
                  dtype=a.dtype)
    out[margin:margin + a.shape[0], margin:margin + a.shape[1]] = a
    return out


class Scorer:
    """Scores pose/box hypotheses of one mesh against a fixed observation.

    Samples are rendered on a grid extended by a guard band of
    ``guard_band * max(width, height)`` pixels per side. Rendered points that
    fall outside the camera image count toward the sample size but can never
    be inliers, so an object pushed mostly off-screen is not rewarded for the
    sliver that remains visible.

    Each worker thread owns its own scratch buffers; results do not depend on
    the number of workers.
    """

    def __init__(self, mesh: TriangleMesh, observation: Observation,
                 weights: LikelihoodWeights = LikelihoodWeights(),
                 epsilon: float = DEFAULT_EPSILON, pixel_window: int = 1,
                 feature_context: bool = True, workers: int = 1, guard_band: float = 0.5):
        if epsilon <= 0:
            raise LikelihoodError("epsilon must be positive")
        if guard_band < 0:
            raise LikelihoodError("guard_band must be >= 0")
        self.mesh = mesh
        self.obs = observation
        k = observation.intrinsics
        # multiple of the feature window keeps sample blocks aligned with observation blocks
        w = observation.params.window
        self.margin = -(-int(round(guard_band * max(k.width, k.height))) // w) * w
        self.grid = pad_grid(k, self.margin)
        self._obs_pts = pad_array(observation.cloud.points, self.margin, np.nan)
        self._obs_labels = pad_array(observation.features.labels, self.margin, 0)
        self.weights = weights
        self.epsilon = float(epsilon)
        self.pixel_window = int(pixel_window)
        self.feature_context = bool(feature_context)
        self.workers = max(1, int(workers))
        self._alphas = weights.as_array()
        self._scratch = [_Scratch(self.grid.shape) for _ in range(self.workers)]
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _run(self, lo, hi, rots, trans, boxes, confs, out, scratch):
        k = self.grid
        p = self.obs.params
        score_range(lo, hi, self.mesh.vertices, self.mesh.triangles, rots, trans, boxes, confs,
                    k.fx, k.fy, k.cx, k.cy, k.z_near, k.z_far,
                    self._obs_pts, self._obs_labels,
                    self.epsilon, self.pixel_window,
                    p.neighborhood_radius, p.log_c_threshold, p.window,
                    p.max_edges_per_window, p.max_planars_per_window,
                    self.feature_context, self._alphas,
                    scratch.zbuf, scratch.rpts, scratch.cmap, scratch.rlabels, scratch.rect, out)

    def score(self, rotations, translations, boxes, confidences) -> np.ndarray:
        """Return (N, 6) rows [w_box, I_b, I_r, I_e, I_p, total].

        rotations: (N, 3, 3); translations: (N, 3); boxes: (N, 4) as
        [u_min, v_min, u_max, v_max]; confidences: (N,).
        """
        rots = np.ascontiguousarray(rotations, dtype=np.float64)
        trans = np.ascontiguousarray(translations, dtype=np.float64)
        boxes = np.ascontiguousarray(boxes, dtype=np.float64) + self.margin
        confs = np.clip(np.ascontiguousarray(confidences, dtype=np.float64), 0.0, 1.0)
        n = len(rots)
        out = np.empty((n, 6))
        if self._pool is None or n < 2 * self.workers:
            self._run(0, n, rots, trans, boxes, confs, out, self._scratch[0])
            return out
        bounds = np.linspace(0, n, self.workers + 1).astype(int)
        futures = [self._pool.submit(self._run, bounds[j], bounds[j + 1], rots, trans, boxes,
                                     confs, out, self._scratch[j])
                   for j in range(self.workers)]
        for f in futures:
            f.result()
        return out

    def score_one(self, pose: Pose, box: BoundingBox) -> TermBreakdown:
        row = self.score(pose.rotation.matrix()[None], pose.t[None], box.as_array()[None],
                         np.array([box.confidence]))[0]
        return TermBreakdown.from_row(row)


def weigh(pose: Pose, box: BoundingBox, obs: OrganizedCloud, obs_features: FeatureCloud,
          mesh: TriangleMesh, intrinsics: CameraIntrinsics,
          weights: LikelihoodWeights = LikelihoodWeights(), epsilon: float = DEFAULT_EPSILON,
          params: FeatureParams = FeatureParams(), pixel_window: int = 1,
          feature_context: bool = True, guard_band: float = 0.5) -> TermBreakdown:
    """Score a single (pose, box) hypothesis against a prepared observation.

    ``obs`` and ``obs_features`` must live on the ``intrinsics`` grid. With
    ``feature_context`` the rendered sample's smoothness is computed with the
    observation filling pixels the sample does not cover.
    """
    if obs.intrinsics.shape != intrinsics.shape:
        raise LikelihoodError("observation grid differs from render intrinsics")
    observation = Observation(OrganizedCloud(obs.points, intrinsics), obs_features, params)
    scorer = Scorer(mesh, observation, weights, epsilon, pixel_window, feature_context,
                    guard_band=guard_band)
    return scorer.score_one(pose, box)
