"""Software z-buffer rasterization of triangle meshes into depth images."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .geometry import CameraIntrinsics, OrganizedCloud, Pose, TriangleMesh


@nb.njit(cache=True, nogil=True)
def _owns_edge(ax, ay, bx, by):
    # top-left rule for positively oriented triangles: of the two
    # triangles sharing an edge, exactly one traverses it in an owned direction
    dy = by - ay
    dx = bx - ax
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


@nb.njit(cache=True, nogil=True)
def _raster_triangle(zbuf, fx, fy, cx, cy, z_near, z_far, p0, p1, p2, rect):
    """Rasterize one camera-frame triangle (all z >= z_near) into zbuf.

    rect holds [u_min, v_min, u_max, v_max] of touched pixels and is grown in place.
    """
    height, width = zbuf.shape
    x0 = fx * p0[0] / p0[2] + cx
    y0 = fy * p0[1] / p0[2] + cy
    x1 = fx * p1[0] / p1[2] + cx
    y1 = fy * p1[1] / p1[2] + cy
    x2 = fx * p2[0] / p2[2] + cx
    y2 = fy * p2[1] / p2[2] + cy
    iz0 = 1.0 / p0[2]
    iz1 = 1.0 / p1[2]
    iz2 = 1.0 / p2[2]

    area = (x2 - x0) * (y1 - y0) - (y2 - y0) * (x1 - x0)
    if area == 0.0 or not np.isfinite(area):
        return
    if area < 0.0:
        x1, x2 = x2, x1
        y1, y2 = y2, y1
        iz1, iz2 = iz2, iz1

    umin = max(0, int(np.ceil(min(x0, min(x1, x2)))))
    umax = min(width - 1, int(np.floor(max(x0, max(x1, x2)))))
    vmin = max(0, int(np.ceil(min(y0, min(y1, y2)))))
    vmax = min(height - 1, int(np.floor(max(y0, max(y1, y2)))))
    if umin > umax or vmin > vmax:
        return

    own12 = _owns_edge(x1, y1, x2, y2)
    own20 = _owns_edge(x2, y2, x0, y0)
    own01 = _owns_edge(x0, y0, x1, y1)

    for v in range(vmin, vmax + 1):
        py = float(v)
        for u in range(umin, umax + 1):
            px = float(u)
            # edge functions; w0 is the weight of vertex 0 (opposite edge 1-2)
            w0 = (px - x1) * (y2 - y1) - (py - y1) * (x2 - x1)
            if w0 < 0.0 or (w0 == 0.0 and not own12):
                continue
            w1 = (px - x2) * (y0 - y2) - (py - y2) * (x0 - x2)
            if w1 < 0.0 or (w1 == 0.0 and not own20):
                continue
            w2 = (px - x0) * (y1 - y0) - (py - y0) * (x1 - x0)
            if w2 < 0.0 or (w2 == 0.0 and not own01):
                continue
            s = w0 + w1 + w2
            z = s / (w0 * iz0 + w1 * iz1 + w2 * iz2)
            if z < z_near or z > z_far:
                continue
            if z < zbuf[v, u]:
                zbuf[v, u] = z
                if u < rect[0]:
                    rect[0] = u
                if v < rect[1]:
                    rect[1] = v
                if u > rect[2]:
                    rect[2] = u
                if v > rect[3]:
                    rect[3] = v


@nb.njit(cache=True, nogil=True)
def _lerp_to_near(a, b, z_near):
    t = (z_near - a[2]) / (b[2] - a[2])
    out = np.empty(3)
    out[0] = a[0] + t * (b[0] - a[0])
    out[1] = a[1] + t * (b[1] - a[1])
    out[2] = z_near
    return out


@nb.njit(cache=True, nogil=True)
def rasterize(zbuf, cam_vertices, triangles, fx, fy, cx, cy, z_near, z_far, rect):
    """Depth-test every triangle of a camera-frame mesh into zbuf (inf = empty)."""
    poly = np.empty((4, 3))
    for k in range(triangles.shape[0]):
        a = cam_vertices[triangles[k, 0]]
        b = cam_vertices[triangles[k, 1]]
        c = cam_vertices[triangles[k, 2]]
        if a[2] > z_far and b[2] > z_far and c[2] > z_far:
            continue
        inside = (a[2] >= z_near) + (b[2] >= z_near) + (c[2] >= z_near)
        if inside == 0:
            continue
        if inside == 3:
            _raster_triangle(zbuf, fx, fy, cx, cy, z_near, z_far, a, b, c, rect)
            continue
        # Sutherland-Hodgman against z = z_near
        n = 0
        for i in range(3):
            if i == 0:
                p, q = a, b
            elif i == 1:
                p, q = b, c
            else:
                p, q = c, a
            p_in = p[2] >= z_near
            q_in = q[2] >= z_near
            if p_in:
                poly[n] = p
                n += 1
            if p_in != q_in:
                poly[n] = _lerp_to_near(p, q, z_near)
                n += 1
        for i in range(1, n - 1):
            _raster_triangle(zbuf, fx, fy, cx, cy, z_near, z_far,
                             poly[0], poly[i], poly[i + 1], rect)


@nb.njit(cache=True, nogil=True)
def transform_vertices(vertices, rot, trans):
    out = np.empty_like(vertices)
    for i in range(vertices.shape[0]):
        for r in range(3):
            out[i, r] = (rot[r, 0] * vertices[i, 0] + rot[r, 1] * vertices[i, 1]
                         + rot[r, 2] * vertices[i, 2] + trans[r])
    return out


@dataclass(frozen=True, eq=False)
class DepthBuffer:
    """(H, W) depth in meters; NaN marks pixels no triangle covers."""

    depth: np.ndarray

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.depth)


class Renderer:
    """Owns a scratch z-buffer for one camera; not thread-safe, make one per worker."""

    def __init__(self, intrinsics: CameraIntrinsics):
        self.intrinsics = intrinsics
        self._zbuf = np.full(intrinsics.shape, np.inf)
        self._rect = np.empty(4, dtype=np.int64)

    def _params(self):
        k = self.intrinsics
        return k.fx, k.fy, k.cx, k.cy, k.z_near, k.z_far

    def render_many(self, items) -> DepthBuffer:
        """Joint z-buffer over (mesh, pose) pairs."""
        self._zbuf.fill(np.inf)
        self._rect[:] = (self.intrinsics.width, self.intrinsics.height, -1, -1)
        for mesh, pose in items:
            cam = transform_vertices(mesh.vertices, pose.rotation.matrix(), pose.t)
            rasterize(self._zbuf, cam, mesh.triangles, *self._params(), self._rect)
        depth = np.where(np.isinf(self._zbuf), np.nan, self._zbuf)
        return DepthBuffer(depth)

    def render(self, mesh: TriangleMesh, pose: Pose) -> DepthBuffer:
        return self.render_many([(mesh, pose)])


def render_depth(mesh: TriangleMesh, pose: Pose, intrinsics: CameraIntrinsics) -> DepthBuffer:
    return Renderer(intrinsics).render(mesh, pose)


def buffer_to_cloud(buffer: DepthBuffer, intrinsics: CameraIntrinsics) -> OrganizedCloud:
    return OrganizedCloud.from_depth(buffer.depth, intrinsics)


# ---------------------------------------------------------------------------
# 16-bit PGM, millimeters, 0 = absent
# ---------------------------------------------------------------------------

def depth_to_mm(depth: np.ndarray) -> np.ndarray:
    mm = np.where(np.isnan(depth), 0.0, np.round(np.nan_to_num(depth) * 1000.0))
    return np.clip(mm, 0, 65535).astype(np.uint16)


def write_pgm(path, depth: np.ndarray) -> None:
    mm = depth_to_mm(depth)
    h, w = mm.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + mm.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Return depth in meters with NaN for absent pixels."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    mm = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return np.where(mm == 0, np.nan, mm.astype(np.float64) / 1000.0)
