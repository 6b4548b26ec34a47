"""Edge and planar feature points of organized clouds.

The smoothness of a point is the norm of the summed displacement to its
present neighbors, divided by neighbor count and by the point's range.
High values mark depth discontinuities, low values flat surfaces.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .geometry import OrganizedCloud

NONE, EDGE, PLANAR = 0, 1, 2


@dataclass(frozen=True)
class FeatureParams:
    window: int = 5
    max_edges_per_window: int = 5
    max_planars_per_window: int = 2
    log_c_threshold: float = -5.5
    neighborhood_radius: int = 2

    def __post_init__(self):
        if self.window < 3:
            raise ValueError("window must be >= 3")
        if self.max_edges_per_window < 0 or self.max_planars_per_window < 0:
            raise ValueError("feature caps must be >= 0")
        if self.neighborhood_radius < 1:
            raise ValueError("neighborhood_radius must be >= 1")


@nb.njit(cache=True, nogil=True)
def smoothness_at(pts, ctx, use_ctx, u, v, radius):
    """c at (u, v), or NaN if the point (in pts) is absent or has no neighbors.

    Neighbors absent from pts are read from ctx when use_ctx is set. Pixels
    closer than radius to the image border are left undefined: their
    neighborhood is one-sided, so even a flat surface would look like an edge.
    """
    height, width = pts.shape[0], pts.shape[1]
    if u < radius or v < radius or u >= width - radius or v >= height - radius:
        return np.nan
    if math.isnan(pts[v, u, 2]):
        return np.nan
    px = pts[v, u, 0]
    py = pts[v, u, 1]
    pz = pts[v, u, 2]
    sx = 0.0
    sy = 0.0
    sz = 0.0
    n = 0
    for vv in range(max(0, v - radius), min(height, v + radius + 1)):
        for uu in range(max(0, u - radius), min(width, u + radius + 1)):
            if uu == u and vv == v:
                continue
            if not math.isnan(pts[vv, uu, 2]):
                src = pts
            elif use_ctx and not math.isnan(ctx[vv, uu, 2]):
                src = ctx
            else:
                continue
            sx += src[vv, uu, 0] - px
            sy += src[vv, uu, 1] - py
            sz += src[vv, uu, 2] - pz
            n += 1
    if n == 0:
        return np.nan
    return math.sqrt(sx * sx + sy * sy + sz * sz) / (n * math.sqrt(px * px + py * py + pz * pz))


@nb.njit(cache=True, nogil=True)
def smoothness_map(pts, ctx, use_ctx, radius, rect, cmap):
    """Fill cmap[v, u] for pixels inside rect = [u0, v0, u1, v1]."""
    for v in range(rect[1], rect[3] + 1):
        for u in range(rect[0], rect[2] + 1):
            cmap[v, u] = smoothness_at(pts, ctx, use_ctx, u, v, radius)


@nb.njit(cache=True, nogil=True)
def select_features(cmap, log_thr, window, max_e, max_p, rect, labels):
    """Label EDGE/PLANAR per non-overlapping window x window block touching rect.

    Edges: ln(c) >= log_thr, largest c first. Planars: ln(c) < log_thr (or c == 0),
    smallest c first. Ties go to the earlier pixel in row-major order.
    """
    height, width = cmap.shape
    bs = window * window
    cand_u = np.empty(bs, dtype=np.int64)
    cand_v = np.empty(bs, dtype=np.int64)
    cand_c = np.empty(bs)
    cand_edge = np.empty(bs, dtype=np.bool_)
    taken = np.empty(bs, dtype=np.bool_)
    b0 = rect[1] // window
    b1 = rect[3] // window
    a0 = rect[0] // window
    a1 = rect[2] // window
    for bv in range(b0, b1 + 1):
        for bu in range(a0, a1 + 1):
            n = 0
            for v in range(bv * window, min(height, (bv + 1) * window)):
                for u in range(bu * window, min(width, (bu + 1) * window)):
                    c = cmap[v, u]
                    if math.isnan(c):
                        continue
                    cand_u[n] = u
                    cand_v[n] = v
                    cand_c[n] = c
                    cand_edge[n] = c > 0.0 and math.log(c) >= log_thr
                    taken[n] = False
                    n += 1
            for _ in range(max_e):
                best = -1
                for i in range(n):
                    if cand_edge[i] and not taken[i]:
                        if best < 0 or cand_c[i] > cand_c[best]:
                            best = i
                if best < 0:
                    break
                taken[best] = True
                labels[cand_v[best], cand_u[best]] = 1
            for _ in range(max_p):
                best = -1
                for i in range(n):
                    if not cand_edge[i] and not taken[i]:
                        if best < 0 or cand_c[i] < cand_c[best]:
                            best = i
                if best < 0:
                    break
                taken[best] = True
                labels[cand_v[best], cand_u[best]] = 2


@nb.njit(cache=True, nogil=True)
def count_feature_inliers(r_pts, r_labels, o_pts, o_labels, kind, eps, pixel_window, rect):
    """(inliers, total) over rendered features of one kind inside rect."""
    height, width = r_labels.shape
    total = 0
    hits = 0
    for v in range(rect[1], rect[3] + 1):
        for u in range(rect[0], rect[2] + 1):
            if r_labels[v, u] != kind:
                continue
            total += 1
            px = r_pts[v, u, 0]
            py = r_pts[v, u, 1]
            pz = r_pts[v, u, 2]
            found = False
            for vv in range(max(0, v - pixel_window), min(height, v + pixel_window + 1)):
                for uu in range(max(0, u - pixel_window), min(width, u + pixel_window + 1)):
                    if o_labels[vv, uu] != kind:
                        continue
                    dx = px - o_pts[vv, uu, 0]
                    dy = py - o_pts[vv, uu, 1]
                    dz = pz - o_pts[vv, uu, 2]
                    if math.sqrt(dx * dx + dy * dy + dz * dz) < eps:
                        found = True
                        break
                if found:
                    break
            if found:
                hits += 1
    return hits, total


@dataclass(frozen=True, eq=False)
class FeatureCloud:
    """Per-pixel feature labels (0 none, 1 edge, 2 planar) over a source cloud."""

    labels: np.ndarray
    cloud: OrganizedCloud

    def _listing(self, kind):
        vs, us = np.nonzero(self.labels == kind)
        return [(int(u), int(v), self.cloud.points[v, u].copy()) for u, v in zip(us, vs)]

    @property
    def edges(self) -> list:
        return self._listing(EDGE)

    @property
    def planars(self) -> list:
        return self._listing(PLANAR)

    @property
    def num_edges(self) -> int:
        return int((self.labels == EDGE).sum())

    @property
    def num_planars(self) -> int:
        return int((self.labels == PLANAR).sum())


def _full_rect(cloud: OrganizedCloud) -> np.ndarray:
    return np.array([0, 0, cloud.width - 1, cloud.height - 1], dtype=np.int64)


def _context_points(cloud: OrganizedCloud, context: OrganizedCloud | None):
    if context is None:
        return cloud.points, False
    if context.points.shape != cloud.points.shape:
        raise ValueError("context cloud must share the grid of the source cloud")
    return context.points, True


def smoothness(cloud: OrganizedCloud, u: int, v: int, radius: int = 2,
               context: OrganizedCloud | None = None) -> float | None:
    """Local smoothness c at (u, v); None when undefined.

    With ``context``, neighbors absent from ``cloud`` are taken from it.
    """
    ctx, use_ctx = _context_points(cloud, context)
    c = smoothness_at(cloud.points, ctx, use_ctx, u, v, radius)
    return None if math.isnan(c) else float(c)


def smoothness_grid(cloud: OrganizedCloud, radius: int = 2,
                    context: OrganizedCloud | None = None) -> np.ndarray:
    ctx, use_ctx = _context_points(cloud, context)
    cmap = np.full(cloud.points.shape[:2], np.nan)
    smoothness_map(cloud.points, ctx, use_ctx, radius, _full_rect(cloud), cmap)
    return cmap


def extract_features(cloud: OrganizedCloud, params: FeatureParams = FeatureParams(),
                     context: OrganizedCloud | None = None) -> FeatureCloud:
    cmap = smoothness_grid(cloud, params.neighborhood_radius, context)
    labels = np.zeros(cmap.shape, dtype=np.int8)
    select_features(cmap, params.log_c_threshold, params.window,
                    params.max_edges_per_window, params.max_planars_per_window,
                    _full_rect(cloud), labels)
    return FeatureCloud(labels, cloud)


def write_features_csv(features: FeatureCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["type", "u", "v", "x", "y", "z"])
        for kind, rows in (("edge", features.edges), ("planar", features.planars)):
            for u, v, p in rows:
                writer.writerow([kind, u, v, repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])


def read_features_csv(path) -> list[tuple[str, int, int, np.ndarray]]:
    with open(path, newline="") as fh:
        return [(row["type"], int(row["u"]), int(row["v"]),
                 np.array([float(row["x"]), float(row["y"]), float(row["z"])]))
                for row in csv.DictReader(fh)]


def block_counts(features: FeatureCloud, window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Per-block edge and planar counts, for cap checks."""
    h, w = features.labels.shape
    bh, bw = -(-h // window), -(-w // window)
    pad = np.zeros((bh * window, bw * window), dtype=np.int8)
    pad[:h, :w] = features.labels
    blocks = pad.reshape(bh, window, bw, window)
    return (blocks == EDGE).sum(axis=(1, 3)), (blocks == PLANAR).sum(axis=(1, 3))

