"""Point clouds from depth maps, point-to-point ICP and error statistics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .calibration import CorrespondenceTable
from .errors import DegenerateRegistrationError, FormatError, GeometryMismatchError
from .geometry import RigidPose
from .mesh import TriangleMesh
from .sensor import DepthMap, SensorModel

KDTREE_MIN_POINTS = 500
TREE_CANDIDATES = 8
RMSE_TOL = 1e-7
PRECISION_FLOOR_MM = 0.1096
REFERENCE_GRASP = {"fitness": 0.597, "rmse": 0.037184}


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite coordinates")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)
        if self.colors is not None:
            c = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(p):
                raise ValueError("one color per point required")
            c.flags.writeable = False
            object.__setattr__(self, "colors", c)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def bounding_radius(self) -> float:
        """Radius of the centroid-centered sphere enclosing every point."""
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.points - self.centroid, axis=1).max())

    def transformed(self, pose: RigidPose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.colors)


def depth_to_pointcloud(depth: DepthMap, table: CorrespondenceTable, model: SensorModel,
                        image: Optional[np.ndarray] = None) -> PointCloud:
    """One point per pixel valid in both the depth map and the table, row-major."""
    if depth.shape != table.valid.shape:
        raise GeometryMismatchError(f"depth map {depth.shape} and correspondence table "
                                    f"{table.valid.shape} differ in crop geometry")
    if not np.isclose(depth.max_depression, model.max_depression):
        raise GeometryMismatchError("depth map and sensor model disagree on the max depression")
    mask = depth.valid & table.valid
    r = model.hemisphere_radius - depth.codes[mask].astype(np.float64) * model.depth_scale
    t, p = table.theta[mask], table.psi[mask]
    st = np.sin(t)
    pts = r[:, None] * np.stack([st * np.cos(p), st * np.sin(p), np.cos(t)], axis=1)
    colors = None
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        colors = img[mask] / (255.0 if np.asarray(image).dtype == np.uint8 else 1.0)
    return PointCloud(pts, colors)


# nearest neighbours

def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_brute(source: np.ndarray, target: np.ndarray, chunk: int = 256):
    """Exhaustive nearest neighbour; ties go to the lowest target index."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    idx = np.empty(len(source), dtype=np.int64)
    d2 = np.empty(len(source))
    for s in range(0, len(source), chunk):
        blk = _sqdist(source[s:s + chunk, None, :], target[None, :, :])
        j = blk.argmin(axis=1)
        idx[s:s + chunk] = j
        d2[s:s + chunk] = blk[np.arange(len(j)), j]
    return np.sqrt(d2), idx


class NearestNeighbors:
    """k-d tree over the target with an exhaustive path for small clouds.

    Candidate distances from the tree are recomputed with the same arithmetic
    as the exhaustive scan, so both paths return identical results.
    """

    def __init__(self, target: np.ndarray, min_tree_points: int = KDTREE_MIN_POINTS):
        self.target = np.asarray(target, dtype=np.float64)
        self.tree = cKDTree(self.target) if len(self.target) >= min_tree_points else None

    def query(self, source: np.ndarray):
        source = np.asarray(source, dtype=np.float64)
        if self.tree is None:
            return nearest_brute(source, self.target)
        k = min(TREE_CANDIDATES, len(self.target))
        dist, cand = self.tree.query(source, k=k)
        dist, cand = dist.reshape(len(source), k), cand.reshape(len(source), k)
        d2 = _sqdist(source[:, None, :], self.target[cand])
        # equal distances resolve to the lower index, as in the exhaustive scan
        order = np.lexsort((cand, d2), axis=1)[:, 0]
        rows = np.arange(len(source))
        best_d2, best_i = d2[rows, order], cand[rows, order]
        if k < len(self.target):
            # rows whose k-th candidate ties the best may hide a lower-index tie further out
            best = np.sqrt(best_d2)
            for r in np.flatnonzero(dist[:, -1] <= best * (1 + 1e-9) + 1e-300):
                ball = np.array(sorted(self.tree.query_ball_point(source[r], best[r] * (1 + 1e-9) + 1e-300)))
                e2 = _sqdist(source[r][None, :], self.target[ball])
                j = np.lexsort((ball, e2))[0]
                best_d2[r], best_i[r] = e2[j], ball[j]
        return np.sqrt(best_d2), best_i


# rigid fitting

def kabsch(source: np.ndarray, target: np.ndarray) -> RigidPose:
    """Least-squares rigid transform mapping ``source`` onto ``target``."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("kabsch needs two (N, 3) arrays of equal shape")
    if len(src) < 3:
        raise ValueError("kabsch needs at least 3 correspondences")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # re-project to remove rounding drift before the pose validity check
    uu, _, vv = np.linalg.svd(rot)
    rot = uu @ vv
    return RigidPose(rot, cd - rot @ cs)


def is_degenerate(points: np.ndarray, rel_tol: float = 1e-9) -> bool:
    """True for fewer than 3 points or a collinear set."""
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 3:
        return True
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    return bool(s[1] <= rel_tol * max(s[0], 1e-300))


@dataclass
class RegistrationResult:
    pose: RigidPose
    fitness: float
    inlier_rmse: float
    iterations: int
    correspondences: int
    rmse_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "fitness": self.fitness, "inlier_rmse": self.inlier_rmse,
                "iterations": self.iterations, "correspondences": self.correspondences,
                "rmse_history": list(self.rmse_history)}


def default_threshold(target: PointCloud) -> float:
    return 0.02 * target.bounding_radius()


def icp_point_to_point(source: PointCloud, target: PointCloud, init: RigidPose = RigidPose(),
                       max_iter: int = 50, inlier_threshold: Optional[float] = None,
                       tol: float = RMSE_TOL, nn: Optional[NearestNeighbors] = None) -> RegistrationResult:
    """Point-to-point ICP.

    Each round matches every transformed source point to its nearest target
    point, keeps pairs within ``inlier_threshold`` and applies the closed-form
    rigid fit. A round that would raise the inlier RMSE is rejected and ends
    the loop, so ``rmse_history`` never increases. The loop also stops after
    ``max_iter`` rounds or when the RMSE improves by less than ``tol``.
    """
    if is_degenerate(source.points) or is_degenerate(target.points):
        raise ValueError("ICP needs at least 3 non-collinear points in each cloud")
    thr = default_threshold(target) if inlier_threshold is None else float(inlier_threshold)
    if not thr > 0:
        raise ValueError("inlier threshold must be positive")
    nn = NearestNeighbors(target.points) if nn is None else nn
    src = source.points

    def match(pose):
        moved = pose.apply(src)
        d, idx = nn.query(moved)
        inl = d <= thr
        if inl.sum() < 3:
            raise DegenerateRegistrationError(
                f"only {int(inl.sum())} correspondences within {thr:g} mm", pose)
        return moved, idx, inl, float(np.sqrt(np.mean(d[inl] ** 2)))

    pose = init
    moved, idx, inl, rmse = match(pose)
    history = [rmse]
    it = 0
    while it < max_iter:
        it += 1
        delta = kabsch(moved[inl], target.points[idx[inl]])
        cand = delta.compose(pose)
        c_moved, c_idx, c_inl, c_rmse = match(cand)
        if c_rmse > rmse:
            break
        improvement = rmse - c_rmse
        pose, moved, idx, inl, rmse = cand, c_moved, c_idx, c_inl, c_rmse
        history.append(rmse)
        if improvement < tol:
            break
    n_inl = int(inl.sum())
    return RegistrationResult(pose, n_inl / len(src), rmse, it, n_inl, history)


def sample_mesh_points(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    tri = mesh.triangles()
    area = mesh.areas()
    face = rng.choice(len(tri), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]
    pts = (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c
    return PointCloud(pts)


@dataclass
class GraspEvaluation:
    trials: list          # RegistrationResult or the exception raised for that trial
    summary: dict

    def to_dict(self) -> dict:
        rows = []
        for i, t in enumerate(self.trials):
            if isinstance(t, RegistrationResult):
                rows.append({"trial": i, "ok": True, "fitness": t.fitness, "inlier_rmse": t.inlier_rmse,
                             "iterations": t.iterations, "pose": t.pose.to_dict()})
            else:
                rows.append({"trial": i, "ok": False, "error": str(t)})
        return {"schema": "densetact-grasp-eval", "version": 1, "trials": rows, "summary": self.summary}


def evaluate_grasp(sensor_clouds: Sequence, object_model, init_poses: Optional[Sequence[RigidPose]] = None,
                   n_object_points: int = 20000, seed: int = 0, inlier_threshold: Optional[float] = None,
                   max_iter: int = 50) -> GraspEvaluation:
    """Register each mounted sensor cloud to the object cloud.

    ``sensor_clouds`` holds ``(cloud, mount_pose)`` pairs; the mount pose takes
    sensor-frame points into the frame the init poses start from.
    """
    if len(sensor_clouds) == 0:
        raise ValueError("need at least one sensor cloud")
    if isinstance(object_model, TriangleMesh):
        target = sample_mesh_points(object_model, n_object_points, seed)
    else:
        target = object_model
    nn = NearestNeighbors(target.points)
    inits = list(init_poses) if init_poses is not None else [RigidPose()] * len(sensor_clouds)
    if len(inits) != len(sensor_clouds):
        raise ValueError("one init pose per sensor cloud required")
    trials = []
    for (cloud, mount), init in zip(sensor_clouds, inits):
        src = cloud.transformed(mount)
        try:
            trials.append(icp_point_to_point(src, target, init, max_iter, inlier_threshold, nn=nn))
        except (DegenerateRegistrationError, ValueError) as exc:
            trials.append(exc)
    ok = [t for t in trials if isinstance(t, RegistrationResult)]
    fit = np.array([t.fitness for t in ok])
    rmse = np.array([t.inlier_rmse for t in ok])
    summary = {
        "trials": len(trials),
        "succeeded": len(ok),
        "fitness_mean": float(fit.mean()) if len(ok) else None,
        "fitness_std": float(fit.std()) if len(ok) else None,
        "rmse_mean_mm": float(rmse.mean()) if len(ok) else None,
        "rmse_std_mm": float(rmse.std()) if len(ok) else None,
        "reference": dict(REFERENCE_GRASP),
    }
    return GraspEvaluation(trials, summary)


# depth error statistics

@dataclass
class ErrorStatistics:
    l1_mm: np.ndarray      # per-image mean absolute depth error
    mse_mm2: np.ndarray    # per-image mean squared error

    @property
    def summary(self) -> dict:
        q = np.quantile(self.l1_mm, [0.05, 0.25, 0.5, 0.75, 0.95])
        return {
            "images": int(len(self.l1_mm)),
            "l1_mean_mm": float(self.l1_mm.mean()),
            "l1_std_mm": float(self.l1_mm.std()),
            "l1_quantiles_mm": {k: float(v) for k, v in zip(("q05", "q25", "q50", "q75", "q95"), q)},
            "mse_mean_mm2": float(self.mse_mm2.mean()),
        }

    def metadata(self) -> dict:
        return {"summary": self.summary, "reference_lines_mm": {"ground_truth_precision": PRECISION_FLOOR_MM}}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "l1_mm", "mse_mm2"])
            for i, (a, b) in enumerate(zip(self.l1_mm, self.mse_mm2)):
                w.writerow([i, f"{a:.9g}", f"{b:.9g}"])
        Path(str(path) + ".json").write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")


def error_statistics(predictions: Sequence[DepthMap], truths: Sequence[DepthMap],
                     model: SensorModel) -> ErrorStatistics:
    if len(predictions) == 0 or len(predictions) != len(truths):
        raise ValueError("need matching, non-empty prediction and ground-truth lists")
    l1, mse = [], []
    for p, t in zip(predictions, truths):
        if p.shape != t.shape:
            raise GeometryMismatchError(f"prediction {p.shape} vs ground truth {t.shape}")
        mask = t.valid
        if not mask.any():
            raise GeometryMismatchError("ground truth has no valid pixels")
        e = (p.codes[mask].astype(np.float64) - t.codes[mask].astype(np.float64)) * model.depth_scale
        l1.append(np.abs(e).mean())
        mse.append((e * e).mean())
    return ErrorStatistics(np.array(l1), np.array(mse))


# PLY

def write_ply(cloud: PointCloud, path) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    cols = None
    if cloud.colors is not None:
        cols = np.floor(np.clip(cloud.colors, 0, 1) * 255 + 0.5).astype(int)
    for i, p in enumerate(cloud.points):
        row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if cols is not None:
            row += f" {cols[i, 0]} {cols[i, 1]} {cols[i, 2]}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply" or "format ascii 1.0" not in text[1]:
        raise FormatError(f"{path} is not an ASCII PLY file")
    try:
        end = text.index("end_header")
        n = int(next(l.split()[2] for l in text[:end] if l.startswith("element vertex")))
        rows = np.array([[float(v) for v in l.split()] for l in text[end + 1:end + 1 + n]]).reshape(n, -1)
    except (ValueError, StopIteration, IndexError) as exc:
        raise FormatError(f"malformed PLY: {exc}") from exc
    colors = rows[:, 3:6] / 255.0 if rows.shape[1] >= 6 else None
    return PointCloud(rows[:, :3], colors)
