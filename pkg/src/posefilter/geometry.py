"""Rigid-body math, pinhole camera, organized clouds and triangle meshes.

Camera frame: +z forward, +x right, +y down. Pixel (u, v) is column u, row v
and its center sits at the integer coordinate, so the image spans
[-0.5, width - 0.5) x [-0.5, height - 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Z_NEAR = 0.05
Z_FAR = 5.0


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quaternion helpers (arrays of shape (..., 4), scalar-first)
# ---------------------------------------------------------------------------

def quat_canonical(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def quat_multiply(a, b):
    """Hamilton product a * b, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def matrix_to_quat(m):
    """Shepperd's method; returns canonical (w >= 0) quaternion."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_canonical(q)


def uniform_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-uniform unit quaternions (Shoemake's subgroup algorithm)."""
    u1, u2, u3 = rng.random((3, n))
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.stack([
        a * np.sin(2 * np.pi * u2),
        a * np.cos(2 * np.pi * u2),
        b * np.sin(2 * np.pi * u3),
        b * np.cos(2 * np.pi * u3),
    ], axis=-1)
    return quat_canonical(q)


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    # a zero draw has probability zero, but guard anyway
    norm[norm == 0] = 1.0
    return v / norm


def perturb_quats(q, sigma_rad: float, rng: np.random.Generator) -> np.ndarray:
    """Left-compose each quaternion with a random-axis, half-normal-angle turn."""
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[0]
    axes = random_unit_vectors(rng, n)
    angles = np.abs(rng.standard_normal(n)) * sigma_rad
    if sigma_rad == 0:
        return q.copy()
    return quat_canonical(quat_multiply(quat_from_axis_angle(axes, angles), q))


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z) with the double cover fixed to w >= 0."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        if not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0:
            raise GeometryError(f"invalid quaternion {tuple(q)}")
        q = quat_canonical(q)
        for name, value in zip("wxyz", q):
            object.__setattr__(self, name, float(value))

    @classmethod
    def identity(cls) -> Rotation:
        return cls()

    @classmethod
    def from_quat(cls, q) -> Rotation:
        return cls(*(float(c) for c in q))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> Rotation:
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        return cls.from_quat(quat_from_axis_angle(axis, angle))

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        return cls.from_quat(matrix_to_quat(m))

    @property
    def quat(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def inverse(self) -> Rotation:
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: Rotation) -> Rotation:
        return Rotation.from_quat(quat_multiply(self.quat, other.quat))

    def apply(self, p):
        return np.asarray(p, dtype=np.float64) @ self.matrix().T

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        return 2.0 * math.atan2(math.sqrt(self.x ** 2 + self.y ** 2 + self.z ** 2), abs(self.w))

    def angle_to(self, other: Rotation) -> float:
        return (self.inverse() * other).angle()


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping object-frame points to the camera frame."""

    rotation: Rotation = field(default_factory=Rotation)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        t = tuple(float(c) for c in self.translation)
        if len(t) != 3 or not all(math.isfinite(c) for c in t):
            raise GeometryError(f"invalid translation {self.translation!r}")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation.from_matrix(m[:3, :3]), tuple(m[:3, 3]))

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: Pose) -> Pose:
        """self o other: apply other first, then self."""
        r = self.rotation * other.rotation
        t = self.rotation.apply(other.t) + self.t
        return Pose(r, tuple(t))

    __matmul__ = compose

    def inverse(self) -> Pose:
        r_inv = self.rotation.inverse()
        return Pose(r_inv, tuple(-r_inv.apply(self.t)))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.matrix().T + self.t

    def to_dict(self) -> dict:
        return {"rotation": [self.rotation.w, self.rotation.x, self.rotation.y, self.rotation.z],
                "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> Pose:
        return cls(Rotation.from_quat(d["rotation"]), tuple(d["translation"]))


def transform_point(pose: Pose, p) -> np.ndarray:
    """Return R p + T."""
    return pose.apply(p)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_near: float = Z_NEAR
    z_far: float = Z_FAR

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.z_near < self.z_far):
            raise GeometryError("need 0 < z_near < z_far")
        if self.width < 16 or self.height < 16:
            raise GeometryError("image must be at least 16x16")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, width: int, height: int) -> CameraIntrinsics:
        """Same field of view sampled on a width x height grid."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            width, height, self.z_near, self.z_far,
        )

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) rays through pixel centers with unit z."""
        u = (np.arange(self.width) - self.cx) / self.fx
        v = (np.arange(self.height) - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        rays[..., 2] = 1.0
        return rays

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "z_near": self.z_near, "z_far": self.z_far}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   float(d.get("z_near", Z_NEAR)), float(d.get("z_far", Z_FAR)))


def project(intrinsics: CameraIntrinsics, p) -> tuple[float, float] | None:
    """Pinhole projection, or None when out of depth range or off-image."""
    x, y, z = (float(c) for c in p)
    if not (intrinsics.z_near <= z <= intrinsics.z_far):
        return None
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    if not (-0.5 <= u < intrinsics.width - 0.5 and -0.5 <= v < intrinsics.height - 0.5):
        return None
    return (u, v)


def backproject(intrinsics: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    if not (intrinsics.z_near <= depth <= intrinsics.z_far):
        raise GeometryError(
            f"depth {depth} outside [{intrinsics.z_near}, {intrinsics.z_far}]")
    return np.array([(u - intrinsics.cx) / intrinsics.fx * depth,
                     (v - intrinsics.cy) / intrinsics.fy * depth,
                     depth])


def sample_uniform_rotation(rng: np.random.Generator) -> Rotation:
    return Rotation.from_quat(uniform_quats(rng, 1)[0])


def perturb_rotation(r: Rotation, sigma_rad: float, rng: np.random.Generator) -> Rotation:
    if sigma_rad < 0:
        raise GeometryError("sigma_rad must be >= 0")
    if sigma_rad == 0:
        return r
    return Rotation.from_quat(perturb_quats(r.quat[None], sigma_rad, rng)[0])


# ---------------------------------------------------------------------------
# meshes and clouds
# ---------------------------------------------------------------------------

def _max_pairwise_distance(v: np.ndarray) -> float:
    best = 0.0
    for i in range(0, len(v), 256):
        d = np.linalg.norm(v[i:i + 256, None, :] - v[None, :, :], axis=-1)
        best = max(best, float(d.max()))
    return best


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    diameter: float = field(init=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) == 0:
            raise GeometryError("mesh needs at least one triangle")
        if t.min() < 0 or t.max() >= len(v):
            raise GeometryError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise GeometryError("non-finite vertex")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        diameter = _max_pairwise_distance(v)
        if diameter <= 0:
            raise GeometryError("mesh diameter must be positive")
        object.__setattr__(self, "diameter", diameter)


def load_obj(path) -> TriangleMesh:
    """Read the `v x y z` / `f i j k` subset of Wavefront OBJ (meters)."""
    vertices, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(c) for c in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise GeometryError(f"{path}:{lineno}: faces must be triangles")
                faces.append([i - 1 for i in idx])
        except ValueError as exc:
            raise GeometryError(f"{path}:{lineno}: {exc}") from exc
    return TriangleMesh(np.array(vertices), np.array(faces))


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class OrganizedCloud:
    """H x W grid of optional points; absent points are NaN rows."""

    points: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.shape != (self.intrinsics.height, self.intrinsics.width, 3):
            raise GeometryError(
                f"cloud shape {pts.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}")
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls, intrinsics: CameraIntrinsics) -> OrganizedCloud:
        return cls(np.full((intrinsics.height, intrinsics.width, 3), np.nan), intrinsics)

    @classmethod
    def from_depth(cls, depth: np.ndarray, intrinsics: CameraIntrinsics) -> OrganizedCloud:
        """Back-project an (H, W) depth image; NaN or out-of-range depth is absent."""
        depth = np.asarray(depth, dtype=np.float64)
        ok = np.isfinite(depth) & (depth >= intrinsics.z_near) & (depth <= intrinsics.z_far)
        pts = intrinsics.pixel_rays() * np.where(ok, depth, np.nan)[..., None]
        return cls(pts, intrinsics)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.points[..., 2])

    @property
    def depth(self) -> np.ndarray:
        return self.points[..., 2]

    @property
    def num_present(self) -> int:
        return int(self.valid.sum())

    def get(self, u: int, v: int) -> np.ndarray | None:
        p = self.points[v, u]
        return None if np.isnan(p[2]) else p.copy()
