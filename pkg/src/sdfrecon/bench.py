"""Evaluation protocol: rigid ICP alignment, visibility filtering, thresholded
precision/recall/F1 curves, threshold selection, AUC and checkpoint selection.

Distances are point-to-point nearest neighbours (k-d tree). Percentages are
on a 0-100 scale throughout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import dilate, voxelize_points

F1_TARGET = 80.0
EARLY_FRACTION = 0.95


class AlignmentError(RuntimeError):
    pass


class LadderError(ValueError):
    pass


# ------------------------------------------------------------------ alignment
@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-8 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be a proper orthonormal matrix")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.scale * self.rotation @ other.translation + self.translation,
                              self.scale * other.scale)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(), "scale": self.scale}


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` onto ``dst``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def _inliers(dist, cutoff, cutoff_factor):
    limit = cutoff if cutoff is not None else cutoff_factor * float(np.median(dist))
    return dist <= limit


def icp_align(source, target, max_iterations: int = 50, cutoff: float | None = None,
              cutoff_factor: float = 5.0, eps: float = 1e-8, init: RigidTransform | None = None):
    """Point-to-point ICP; returns ``(transform source -> target, final inlier RMSE)``.

    Correspondences farther than ``cutoff`` (default: ``cutoff_factor`` times
    the median nearest-neighbour distance of the current iterate) are ignored.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise AlignmentError("ICP needs non-empty source and target clouds")
    tree = cKDTree(dst)
    T = init or RigidTransform()
    prev = np.inf
    for _ in range(max_iterations):
        dist, nn = tree.query(T.apply(src))
        ok = _inliers(dist, cutoff, cutoff_factor)
        if ok.sum() < 3:
            raise AlignmentError(f"only {int(ok.sum())} correspondences within the cutoff")
        T = kabsch(src[ok], dst[nn[ok]])
        rmse = float(np.sqrt(np.mean(np.sum((T.apply(src[ok]) - dst[nn[ok]]) ** 2, axis=1))))
        if abs(prev - rmse) < eps:
            break
        prev = rmse
    return T, residual_rmse(T, src, dst, cutoff, cutoff_factor, tree)


def residual_rmse(T: RigidTransform, source, target, cutoff=None, cutoff_factor: float = 5.0, tree=None) -> float:
    """Inlier nearest-neighbour RMSE of ``T(source)`` against ``target``."""
    tree = tree or cKDTree(np.asarray(target, dtype=np.float64))
    dist, _ = tree.query(T.apply(source))
    ok = _inliers(dist, cutoff, cutoff_factor)
    return float(np.sqrt(np.mean(dist[ok] ** 2))) if ok.any() else float("inf")


def reprojection_errors(points, images, point_ids) -> np.ndarray:
    """Pixel distance between each projected 3D point and its recorded 2D observations.

    ``points`` are already expressed in the cameras' frame; ``point_ids``
    gives the SfM id of each row. Observations of unknown ids are skipped.
    """
    pos = {int(i): p for i, p in zip(point_ids, np.asarray(points, dtype=np.float64).reshape(-1, 3))}
    errs = []
    for rec in images:
        ids = np.asarray(rec.point3d_ids)
        sel = [k for k, i in enumerate(ids) if int(i) in pos]
        if not sel:
            continue
        uv, _ = rec.camera.project(np.array([pos[int(ids[k])] for k in sel]))
        errs.append(np.linalg.norm(uv - rec.points2d[sel], axis=1))
    return np.concatenate(errs) if errs else np.zeros(0)


# ------------------------------------------------------------------ filtering
def visibility_filter(reference, candidates, voxel_size: float, dilation_radius: int = 1) -> np.ndarray:
    """Keep candidate points inside the dilated voxelisation of ``reference``."""
    if not voxel_size > 0:
        raise ValueError("voxel size must be positive")
    cand = np.asarray(candidates, dtype=np.float64).reshape(-1, 3)
    grid = dilate(voxelize_points(reference, voxel_size), dilation_radius)
    if len(grid) == 0:
        return cand[:0]
    return cand[grid.contains(cand)]


# -------------------------------------------------------------------- metrics
def _check_clouds(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("precision/recall need non-empty prediction and ground-truth clouds")
    return pred, gt


def nn_distances(pred, gt):
    """``(pred -> gt, gt -> pred)`` nearest-neighbour distances."""
    pred, gt = _check_clouds(pred, gt)
    return cKDTree(gt).query(pred)[0], cKDTree(pred).query(gt)[0]


def _prf(d_pred, d_gt, taus):
    taus = np.asarray(taus, dtype=np.float64)
    p = 100.0 * np.mean(d_pred[:, None] <= taus[None], axis=0)
    r = 100.0 * np.mean(d_gt[:, None] <= taus[None], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


def precision_recall_f1(pred, gt, tau: float):
    if not tau > 0:
        raise ValueError("threshold must be positive")
    p, r, f = _prf(*nn_distances(pred, gt), [tau])
    return float(p[0]), float(r[0]), float(f[0])


def pr_curves(pred, gt, taus):
    """Precision, recall and F1 at every rung of ``taus`` (distances computed once)."""
    return _prf(*nn_distances(pred, gt), taus)


def default_ladder(extent: float, rungs: int = 400, top_fraction: float = 0.2) -> np.ndarray:
    """``0, dt, 2 dt, ...`` up to ``top_fraction * extent``."""
    return np.linspace(0.0, top_fraction * extent, rungs + 1)


def select_thresholds(taus, f1, target: float = F1_TARGET):
    """``(theta_max, low, medium, high)``: first rung reaching ``target``, then its quartiles."""
    taus = np.asarray(taus, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    if np.any(np.diff(taus) <= 0):
        raise LadderError("threshold ladder must be strictly ascending")
    hit = np.flatnonzero((f1 >= target) & (taus > 0))
    if len(hit) == 0:
        raise LadderError(f"F1 never reaches {target} on the ladder (max {f1.max():.2f} at tau <= {taus[-1]:g}); "
                          "extend the ladder to larger thresholds")
    t = float(taus[hit[0]])
    return t, 0.25 * t, 0.5 * t, 0.75 * t


def auc(taus, values, theta_max: float, normalized: bool = True) -> float:
    """Trapezoidal integral of ``values(tau)`` over ``[0, theta_max]``, optionally divided by ``theta_max``."""
    taus = np.asarray(taus, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(taus) < 2 or taus[0] > 0 or taus[-1] < theta_max:
        raise LadderError("metric must be sampled on >= 2 rungs covering [0, theta_max]")
    if not theta_max > 0:
        raise ValueError("theta_max must be positive")
    inside = taus < theta_max
    x = np.concatenate([taus[inside], [theta_max]])
    y = np.concatenate([values[inside], [np.interp(theta_max, taus, values)]])
    area = float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))
    return area / theta_max if normalized else area


def early_checkpoint(scores, fraction: float = EARLY_FRACTION) -> int:
    """Index of the first checkpoint scoring at least ``fraction`` of the last one."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) == 0:
        raise ValueError("no checkpoints")
    return int(np.flatnonzero(s >= fraction * s[-1])[0])


# --------------------------------------------------------------------- report
@dataclass
class EvalReport:
    thresholds: dict            # low / medium / high / theta_max
    rows: dict                  # name -> {"precision", "recall", "f1"}
    auc: dict                   # precision / recall / f1, normalised
    auc_raw: dict               # same, unnormalised
    n_pred: int
    n_gt: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def table(self) -> str:
        head = f"{'':<10}{'tau':>10}{'P':>9}{'R':>9}{'F1':>9}"
        lines = [head, "-" * len(head)]
        for name in ("low", "medium", "high"):
            r = self.rows[name]
            lines.append(f"{name:<10}{self.thresholds[name]:>10.5f}{r['precision']:>9.2f}{r['recall']:>9.2f}"
                         f"{r['f1']:>9.2f}")
        lines.append(f"{'AUC':<10}{self.thresholds['theta_max']:>10.5f}{self.auc['precision']:>9.2f}"
                     f"{self.auc['recall']:>9.2f}{self.auc['f1']:>9.2f}")
        return "\n".join(lines)


def evaluate(pred, gt, taus=None, theta_max: float | None = None) -> EvalReport:
    """Full report. ``theta_max`` fixes the integration limit (to compare runs on a common scale)."""
    pred, gt = _check_clouds(pred, gt)
    if taus is None:
        lo, hi = gt.min(axis=0), gt.max(axis=0)
        taus = default_ladder(float(np.max(hi - lo)))
    taus = np.asarray(taus, dtype=np.float64)
    d_pred, d_gt = nn_distances(pred, gt)
    p, r, f = _prf(d_pred, d_gt, taus)
    if theta_max is None:
        theta_max = select_thresholds(taus, f)[0]
    thr = {"theta_max": theta_max, "low": 0.25 * theta_max, "medium": 0.5 * theta_max, "high": 0.75 * theta_max}
    rows = {}
    for name in ("low", "medium", "high"):
        pp, rr, ff = _prf(d_pred, d_gt, [thr[name]])
        rows[name] = {"precision": float(pp[0]), "recall": float(rr[0]), "f1": float(ff[0])}
    curves = {"precision": p, "recall": r, "f1": f}
    return EvalReport(thr, rows, {k: auc(taus, v, theta_max) for k, v in curves.items()},
                      {k: auc(taus, v, theta_max, normalized=False) for k, v in curves.items()},
                      len(pred), len(gt))
