"""ADD / ADD-S pose errors and accuracy-threshold curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, TriangleMesh

BRUTE_FORCE_LIMIT = 1000


@dataclass(frozen=True)
class PoseError:
    add: float
    add_s: float


def _transformed(mesh: TriangleMesh, pose: Pose) -> np.ndarray:
    return mesh.vertices @ pose.rotation.matrix().T + pose.t


def _row_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


def add_error(mesh: TriangleMesh, pose_gt: Pose, pose_est: Pose) -> float:
    """Mean distance between corresponding model vertices under the two poses."""
    return float(_row_dist(_transformed(mesh, pose_gt), _transformed(mesh, pose_est)).mean())


def nearest_indices(query: np.ndarray, ref: np.ndarray, brute_force: bool | None = None) -> np.ndarray:
    if brute_force is None:
        brute_force = len(ref) <= BRUTE_FORCE_LIMIT
    if brute_force:
        idx = np.empty(len(query), dtype=np.int64)
        for i in range(0, len(query), 512):
            q = query[i:i + 512]
            d2 = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(axis=-1)
            idx[i:i + 512] = d2.argmin(axis=1)
        return idx
    _, idx = cKDTree(ref).query(query)
    return np.asarray(idx, dtype=np.int64)


def adds_error(mesh: TriangleMesh, pose_gt: Pose, pose_est: Pose,
               brute_force: bool | None = None) -> float:
    """Mean over ground-truth vertices of the distance to the closest estimated vertex."""
    gt = _transformed(mesh, pose_gt)
    est = _transformed(mesh, pose_est)
    idx = nearest_indices(gt, est, brute_force)
    # distances recomputed identically on either search path
    return float(_row_dist(gt, est[idx]).mean())


def pose_error(mesh: TriangleMesh, pose_gt: Pose, pose_est: Pose) -> PoseError:
    return PoseError(add_error(mesh, pose_gt, pose_est), adds_error(mesh, pose_gt, pose_est))


def object_error(mesh: TriangleMesh, pose_gt: Pose, pose_est: Pose | None, symmetric: bool) -> float:
    """ADD-S for symmetric classes, ADD otherwise; inf for a missing estimate."""
    if pose_est is None:
        return float("inf")
    fn = adds_error if symmetric else add_error
    return fn(mesh, pose_gt, pose_est)


@dataclass(frozen=True, eq=False)
class AccuracyCurve:
    thresholds: np.ndarray
    accuracy: np.ndarray
    auc: float

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds.tolist(), self.accuracy.tolist()))


def accuracy_curve(errors, t_max: float = 0.04, steps: int = 401) -> AccuracyCurve:
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        raise ValueError("accuracy curve needs at least one error")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if np.any(np.isnan(errors)) or np.any(errors < 0):
        raise ValueError("errors must be non-negative")
    thresholds = np.linspace(0.0, t_max, steps)
    accuracy = (errors[None, :] < thresholds[:, None]).mean(axis=1)
    auc = float(np.trapezoid(accuracy, thresholds) / t_max)
    return AccuracyCurve(thresholds, accuracy, auc)
