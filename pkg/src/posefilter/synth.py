"""Procedural tabletop scenes, observation rendering and depth-sensor corruption."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, OrganizedCloud, Pose, Rotation, TriangleMesh
from .renderer import Renderer

SETTINGS = ("base", "dark", "occlusion")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

_BOX_FACES = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]


def _box_parts(lo, hi, offset=0):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    verts = np.array([[hi[0] if i & 4 else lo[0],
                       hi[1] if i & 2 else lo[1],
                       hi[2] if i & 1 else lo[2]] for i in range(8)])
    tris = []
    for a, b, c, d in _BOX_FACES:
        tris += [(a + offset, b + offset, c + offset), (a + offset, c + offset, d + offset)]
    return verts, tris


def _centered(verts, tris) -> TriangleMesh:
    verts = np.asarray(verts, float)
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    return TriangleMesh(verts - center, np.asarray(tris))


def make_primitive(kind: str, dims, tessellation: int = 24) -> TriangleMesh:
    """Closed triangulated primitive centered on its bounding-box center.

    box: (sx, sy, sz); cylinder: (diameter, height) about the z axis;
    lshape: (a, b, c[, t]) three bars of thickness t along x, y and z, joined
    corner-to-corner so the shape has no rotational or mirror symmetry.
    """
    dims = [float(d) for d in dims]
    if any(d <= 0 for d in dims):
        raise ValueError(f"dimensions must be positive: {dims}")
    if kind == "box":
        sx, sy, sz = dims
        v, t = _box_parts([-sx / 2, -sy / 2, -sz / 2], [sx / 2, sy / 2, sz / 2])
        return TriangleMesh(v, np.array(t))
    if kind == "cylinder":
        d, h = dims
        n = max(3, int(tessellation))
        ang = 2 * np.pi * np.arange(n) / n
        ring = np.stack([0.5 * d * np.cos(ang), 0.5 * d * np.sin(ang)], axis=1)
        verts = np.concatenate([
            np.column_stack([ring, np.full(n, -h / 2)]),
            np.column_stack([ring, np.full(n, h / 2)]),
            [[0, 0, -h / 2], [0, 0, h / 2]],
        ])
        bc, tc = 2 * n, 2 * n + 1
        tris = []
        for i in range(n):
            j = (i + 1) % n
            tris += [(i, j, n + j), (i, n + j, n + i), (bc, j, i), (tc, n + i, n + j)]
        return TriangleMesh(verts, np.array(tris))
    if kind == "lshape":
        if len(dims) == 3:
            dims.append(min(dims) / 4)
        a, b, c, th = dims
        if min(a, b, c) <= 2 * th:
            raise ValueError("lshape arms must be longer than twice the thickness")
        parts = [
            ([0, 0, 0], [a, th, th]),
            ([0, th, 0], [th, b, th]),
            ([0, b - th, th], [th, b, c]),
        ]
        verts, tris = [], []
        for lo, hi in parts:
            v, t = _box_parts(lo, hi, offset=len(verts))
            verts.extend(v.tolist())
            tris.extend(t)
        return _centered(verts, tris)
    raise ValueError(f"unknown primitive kind {kind!r}")


@dataclass(frozen=True)
class ObjectClass:
    name: str
    kind: str
    dims: tuple
    symmetric: bool

    def mesh(self) -> TriangleMesh:
        return make_primitive(self.kind, self.dims)


# Stand-ins for household objects; symmetric classes are scored with ADD-S.
CATALOG = {
    oc.name: oc for oc in [
        ObjectClass("bracket", "lshape", (0.12, 0.10, 0.08, 0.03), False),
        ObjectClass("soup_can", "cylinder", (0.066, 0.10), True),
        ObjectClass("cracker_box", "box", (0.06, 0.16, 0.21), True),
        ObjectClass("clamp", "lshape", (0.10, 0.14, 0.07, 0.025), False),
        ObjectClass("sugar_box", "box", (0.04, 0.09, 0.175), True),
        ObjectClass("mustard_bottle", "cylinder", (0.07, 0.19), True),
        ObjectClass("gelatin_box", "box", (0.085, 0.07, 0.03), True),
    ]
}
CLASS_ORDER = list(CATALOG)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorNoiseSpec:
    axial_noise: float = 0.0  # depth std at 1 m; scales with z^2
    dropout: float = 0.0
    quantization: float = 0.0

    def __post_init__(self):
        if self.axial_noise < 0 or self.quantization < 0 or not 0 <= self.dropout <= 1:
            raise ValueError("noise parameters must be non-negative, dropout in [0, 1]")


DARK_NOISE = SensorNoiseSpec(axial_noise=0.0015, dropout=0.15, quantization=0.001)


@dataclass(frozen=True, eq=False)
class SceneObject:
    object_class: ObjectClass
    pose: Pose
    mesh: TriangleMesh = field(repr=False)

    @property
    def name(self) -> str:
        return self.object_class.name


@dataclass(frozen=True, eq=False)
class SceneSpec:
    objects: tuple
    intrinsics: CameraIntrinsics
    table_pose: Pose | None = None
    table_size: float = 1.2
    setting: str = "base"
    seed: int = 0
    noise: SensorNoiseSpec = SensorNoiseSpec()

    def __post_init__(self):
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError("scene classes must be distinct")

    def table_mesh(self) -> TriangleMesh | None:
        if self.table_pose is None:
            return None
        s = self.table_size / 2
        verts = np.array([[-s, -s, 0.0], [s, -s, 0.0], [s, s, 0.0], [-s, s, 0.0]])
        return TriangleMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))

    def by_name(self, name: str) -> SceneObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(name)


def default_intrinsics(width: int = 96, height: int = 96) -> CameraIntrinsics:
    f = 1.25 * width
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def table_frame(tilt_deg: float = 35.0, distance: float = 0.75) -> Pose:
    """Table plane frame (z = table normal) for a camera pitched down by tilt_deg."""
    th = math.radians(tilt_deg)
    up = np.array([0.0, -math.cos(th), -math.sin(th)])
    x = np.array([1.0, 0.0, 0.0])
    y = np.cross(up, x)
    rot = np.column_stack([x, y, up])
    return Pose(Rotation.from_matrix(rot), (0.0, 0.0, distance))


_RESTING = [
    Rotation(),
    Rotation.from_axis_angle([1, 0, 0], math.pi / 2),
    Rotation.from_axis_angle([1, 0, 0], -math.pi / 2),
    Rotation.from_axis_angle([0, 1, 0], math.pi / 2),
    Rotation.from_axis_angle([0, 1, 0], -math.pi / 2),
    Rotation.from_axis_angle([1, 0, 0], math.pi),
]


def place_on_table(mesh: TriangleMesh, table: Pose, x: float, y: float, yaw: float,
                   resting: Rotation, gap: float = 0.002) -> Pose:
    rot = Rotation.from_axis_angle([0, 0, 1], yaw) * resting
    lift = -float(rot.apply(mesh.vertices)[:, 2].min()) + gap
    local = Pose(rot, (x, y, lift))
    return table.compose(local)


def _silhouettes(spec_objects, intrinsics):
    r = Renderer(intrinsics)
    return [r.render(o.mesh, o.pose).mask for o in spec_objects]


def overlapping_pairs(scene: SceneSpec) -> list[tuple[str, str]]:
    masks = _silhouettes(scene.objects, scene.intrinsics)
    pairs = []
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if np.any(masks[i] & masks[j]):
                pairs.append((scene.objects[i].name, scene.objects[j].name))
    return pairs


def generate_scene(classes, setting: str = "base", seed: int = 0,
                   intrinsics: CameraIntrinsics | None = None, table: bool = True,
                   max_tries: int = 200) -> SceneSpec:
    """Random tabletop arrangement of the named catalog classes.

    base/dark: silhouettes pairwise disjoint (dark shares base's layout for the
    same seed and adds depth noise); occlusion: objects stacked in depth so at
    least two silhouettes overlap.
    """
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    classes = [CATALOG[c] if isinstance(c, str) else c for c in classes]
    if not classes:
        raise ValueError("need at least one object")
    intrinsics = intrinsics or default_intrinsics()
    rng = np.random.default_rng([seed, 0 if setting == "dark" else SETTINGS.index(setting)])
    tpose = table_frame()
    noise = DARK_NOISE if setting == "dark" else SensorNoiseSpec()
    meshes = [c.mesh() for c in classes]

    renderer = Renderer(intrinsics)
    for _ in range(max_tries):
        objs, masks, xys = [], [], []
        for k, (oc, mesh) in enumerate(zip(classes, meshes)):
            for _ in range(max_tries):
                if setting == "occlusion" and k > 0:
                    # behind the previous object along the table's depth axis
                    px, py = xys[-1]
                    x = px + rng.uniform(-0.03, 0.03)
                    y = py + rng.uniform(0.06, 0.12)
                else:
                    x, y = rng.uniform(-0.2, 0.2), rng.uniform(-0.15, 0.15)
                pose = place_on_table(mesh, tpose, x, y, rng.uniform(0, 2 * np.pi),
                                      _RESTING[rng.integers(len(_RESTING))])
                mask = renderer.render(mesh, pose).mask
                if not mask.any() or _touches_border(mask):
                    continue
                overlaps = any(np.any(mask & m) for m in masks)
                if setting == "occlusion" and k > 0:
                    if not np.any(mask & masks[-1]):
                        continue
                elif overlaps:
                    continue
                objs.append(SceneObject(oc, pose, mesh))
                masks.append(mask)
                xys.append((x, y))
                break
            else:
                break  # this object found no spot: restart the layout
        if len(objs) == len(classes):
            return SceneSpec(tuple(objs), intrinsics, tpose if table else None,
                             setting=setting, seed=seed, noise=noise)
    raise RuntimeError(f"could not place {len(classes)} objects for setting {setting!r}")


def _touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


def render_scene(spec: SceneSpec) -> OrganizedCloud:
    """Joint z-buffer over all objects and the table."""
    items = [(o.mesh, o.pose) for o in spec.objects]
    table = spec.table_mesh()
    if table is not None:
        items.append((table, spec.table_pose))
    buf = Renderer(spec.intrinsics).render_many(items)
    return OrganizedCloud.from_depth(buf.depth, spec.intrinsics)


def corrupt(cloud: OrganizedCloud, spec: SensorNoiseSpec, rng: np.random.Generator) -> OrganizedCloud:
    """Dropout, z^2-scaled axial noise, then quantization of depth."""
    depth = cloud.depth.copy()
    shape = depth.shape
    drop = rng.random(shape) < spec.dropout
    noise = rng.standard_normal(shape)
    present = ~np.isnan(depth)
    if spec.dropout == 0 and spec.axial_noise == 0 and spec.quantization == 0:
        return OrganizedCloud(cloud.points.copy(), cloud.intrinsics)
    depth = depth + spec.axial_noise * depth * depth * noise
    if spec.quantization > 0:
        depth = np.round(depth / spec.quantization) * spec.quantization
    depth[~present | drop] = np.nan
    return OrganizedCloud.from_depth(depth, cloud.intrinsics)


def observe(spec: SceneSpec) -> OrganizedCloud:
    """Rendered scene with the scene's own sensor noise applied (seeded by the scene)."""
    cloud = render_scene(spec)
    return corrupt(cloud, spec.noise, np.random.default_rng([spec.seed, 99]))
