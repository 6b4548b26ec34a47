"""Scene bundle directories on disk.

Layout::

    scene.json        setting, seed, noise, table, objects (class, kind, dims,
                      symmetry, ground-truth pose, mesh path), overlapping pairs
    intrinsics.json   camera model
    depth.pgm         observed depth, 16-bit millimeters, 0 = absent
    gt_boxes.json     ground-truth boxes in the detection-prior schema
    meshes/<class>.obj
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .geometry import CameraIntrinsics, OrganizedCloud, Pose, TriangleMesh, load_obj, save_obj
from .priors import DetectionPrior, gt_box_from_pose, load_prior, save_prior
from .renderer import read_pgm, write_pgm
from .synth import (
    CATALOG,
    ObjectClass,
    SceneObject,
    SceneSpec,
    SensorNoiseSpec,
    observe,
    overlapping_pairs,
)


class BundleError(ValueError):
    pass


def dump_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise BundleError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def gt_boxes(scene: SceneSpec) -> DetectionPrior:
    k = scene.intrinsics
    prior = DetectionPrior(k.width, k.height)
    for o in scene.objects:
        prior.detections[o.name] = [gt_box_from_pose(o.mesh, o.pose, k)]
    return prior


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "setting": scene.setting,
        "seed": scene.seed,
        "noise": {"axial_noise": scene.noise.axial_noise, "dropout": scene.noise.dropout,
                  "quantization": scene.noise.quantization},
        "table": (None if scene.table_pose is None
                  else {"pose": scene.table_pose.to_dict(), "size": scene.table_size}),
        "objects": [{
            "class": o.name,
            "kind": o.object_class.kind,
            "dims": list(o.object_class.dims),
            "symmetric": o.object_class.symmetric,
            "pose": o.pose.to_dict(),
            "mesh": f"meshes/{o.name}.obj",
        } for o in scene.objects],
        "overlapping_pairs": [list(p) for p in overlapping_pairs(scene)] if len(scene.objects) > 1 else [],
    }


def write_bundle(scene: SceneSpec, out) -> Path:
    """Write a bundle directory; the observation is the scene with its own sensor noise."""
    out = Path(out)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    dump_json(scene_to_dict(scene), out / "scene.json")
    dump_json(scene.intrinsics.to_dict(), out / "intrinsics.json")
    write_pgm(out / "depth.pgm", observe(scene).depth)
    save_prior(gt_boxes(scene), out / "gt_boxes.json")
    for o in scene.objects:
        save_obj(o.mesh, out / "meshes" / f"{o.name}.obj")
    return out


@dataclass(frozen=True, eq=False)
class Bundle:
    root: Path
    scene: SceneSpec
    observation: OrganizedCloud

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.scene.intrinsics

    @property
    def classes(self) -> list[str]:
        return [o.name for o in self.scene.objects]

    @property
    def meshes(self) -> dict[str, TriangleMesh]:
        return {o.name: o.mesh for o in self.scene.objects}

    def gt_boxes(self) -> DetectionPrior:
        return load_prior(self.root / "gt_boxes.json")


def read_bundle(root) -> Bundle:
    root = Path(root)
    if not root.is_dir():
        raise BundleError(f"scene bundle not found: {root}")
    data = read_json(root / "scene.json")
    intr = CameraIntrinsics.from_dict(read_json(root / "intrinsics.json"))
    try:
        objects = []
        for entry in data["objects"]:
            oc = ObjectClass(entry["class"], entry["kind"], tuple(entry["dims"]), bool(entry["symmetric"]))
            mesh_path = root / entry["mesh"]
            if not mesh_path.is_file():
                raise BundleError(f"missing mesh {mesh_path}")
            objects.append(SceneObject(oc, Pose.from_dict(entry["pose"]), load_obj(mesh_path)))
        table = data.get("table")
        scene = SceneSpec(tuple(objects), intr,
                          Pose.from_dict(table["pose"]) if table else None,
                          table["size"] if table else 1.2,
                          data["setting"], int(data["seed"]), SensorNoiseSpec(**data["noise"]))
    except (KeyError, TypeError) as exc:
        raise BundleError(f"{root / 'scene.json'}: malformed ({exc!r})") from exc
    depth_path = root / "depth.pgm"
    if not depth_path.is_file():
        raise BundleError(f"missing file: {depth_path}")
    depth = read_pgm(depth_path)
    if depth.shape != intr.shape:
        raise BundleError(f"depth.pgm is {depth.shape[1]}x{depth.shape[0]}, "
                          f"intrinsics say {intr.width}x{intr.height}")
    return Bundle(root, scene, OrganizedCloud.from_depth(depth, intr))


def resolve_meshes(bundle: Bundle, classes) -> dict[str, TriangleMesh]:
    """Bundle meshes, falling back to the catalog for classes absent from the scene."""
    meshes = bundle.meshes
    out = {}
    for cls in classes:
        if cls in meshes:
            out[cls] = meshes[cls]
        elif cls in CATALOG:
            out[cls] = CATALOG[cls].mesh()
        else:
            raise BundleError(f"no mesh for class {cls!r} (not in the scene or the catalog)")
    return out


def symmetry(bundle: Bundle) -> dict[str, bool]:
    return {o.name: o.object_class.symmetric for o in bundle.scene.objects}

