"""Trajectory and surface error metrics plus per-frame timing reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose


def rigid_align(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid ``T`` with ``T(src) ~ dst`` (no scale)."""
    ms, md = src.mean(0), dst.mean(0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose(R, md - R @ ms)


# ------------------------------------------------------------------ ATE
@dataclass
class AteReport:
    rmse: float
    rmse_xyz: np.ndarray
    aligned: np.ndarray          # (n, 3) aligned estimate positions
    alignment: Pose              # maps estimate into the ground-truth frame
    n_pairs: int

    def to_text(self) -> str:
        x, y, z = self.rmse_xyz
        return (f"ate_rmse_cm {self.rmse:.6f}\nrmse_x {x:.6f}\nrmse_y {y:.6f}\nrmse_z {z:.6f}\n"
                f"pairs {self.n_pairs}\n")


def associate(t_est: np.ndarray, t_gt: np.ndarray, max_dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-timestamp pairs within ``max_dt``; each ground-truth sample used once."""
    t_est, t_gt = np.asarray(t_est, float), np.asarray(t_gt, float)
    if len(t_gt) == 0 or len(t_est) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    j = np.clip(np.searchsorted(t_gt, t_est), 1, len(t_gt) - 1) if len(t_gt) > 1 else np.zeros(len(t_est), int)
    if len(t_gt) > 1:
        left = np.abs(t_est - t_gt[j - 1]) <= np.abs(t_est - t_gt[j])
        j = np.where(left, j - 1, j)
    ok = np.abs(t_est - t_gt[j]) <= max_dt
    i = np.nonzero(ok)[0]
    j = j[ok]
    _, first = np.unique(j, return_index=True)
    return i[first], j[first]


def ate_rmse(t_est, est: list[Pose] | np.ndarray, t_gt, gt: list[Pose] | np.ndarray,
             rate: float = 15.0) -> AteReport:
    pe = np.array([p.translation for p in est]) if not isinstance(est, np.ndarray) else est
    pg = np.array([p.translation for p in gt]) if not isinstance(gt, np.ndarray) else gt
    i, j = associate(t_est, t_gt, 0.5 / rate)
    if len(i) < 3:
        raise ValueError(f"only {len(i)} associated pose pairs, need at least 3")
    a, b = pe[i], pg[j]
    T = rigid_align(a, b)
    aligned = T.apply(a)
    d = aligned - b
    return AteReport(float(np.sqrt((d ** 2).sum(1).mean())), np.sqrt((d ** 2).mean(0)), aligned, T, len(i))


# ------------------------------------------------------------------ surface
@dataclass
class SurfaceReport:
    rmse: float
    inlier_fraction: float       # map points within ``inlier_dist`` of the reference after alignment
    alignment: Pose
    iterations: int
    diverged: bool
    direction: str = "map->gt"
    history: list[float] = field(default_factory=list)

    def to_text(self) -> str:
        return (f"surface_rmse_cm {self.rmse:.6f}\ndirection {self.direction}\n"
                f"inlier_fraction {self.inlier_fraction:.6f}\niterations {self.iterations}\n"
                f"diverged {int(self.diverged)}\n")


def surface_rmse(map_points: np.ndarray, gt_points: np.ndarray, max_iter: int = 50,
                 tol: float = 1e-10, inlier_dist: float = 0.5, max_corr: float = 2.0,
                 align: bool = True) -> SurfaceReport:
    """Point-to-point ICP of the map onto the reference, then nearest-neighbour RMSE.

    Distances run from map points to the reference cloud; swapping the
    arguments gives a different number.  Pairs farther apart than
    ``max_corr`` cm are left out of the alignment.  Five consecutive RMSE
    increases, or fewer than three usable pairs, flag divergence; the best
    alignment seen is reported either way.
    """
    src = np.asarray(map_points, float).reshape(-1, 3)
    dst = np.asarray(gt_points, float).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("point sets must be non-empty")
    tree = cKDTree(dst)
    best_T = Pose.identity()
    d, idx = tree.query(src)
    hist = [float(np.sqrt(np.mean(d ** 2)))]
    best, ups, diverged, it = hist[0], 0, False, 0
    if align:
        for it in range(1, max_iter + 1):
            ok = d <= max_corr
            if ok.sum() < 3:
                diverged = True
                break
            T = rigid_align(src[ok], dst[idx[ok]])
            d, idx = tree.query(T.apply(src))
            r = float(np.sqrt(np.mean(d ** 2)))
            ups = ups + 1 if r > hist[-1] + 1e-12 else 0
            hist.append(r)
            if r < best:
                best, best_T = r, T
            if ups >= 5:
                diverged = True
                break
            if abs(hist[-2] - r) <= tol * max(1.0, r):
                break
    d, _ = tree.query(best_T.apply(src))
    return SurfaceReport(float(np.sqrt(np.mean(d ** 2))), float(np.mean(d <= inlier_dist)), best_T, it,
                         diverged, history=hist)


# ------------------------------------------------------------------ timing
@dataclass
class TimingReport:
    times_ms: np.ndarray
    window: int = 30

    def __post_init__(self):
        self.times_ms = np.asarray(self.times_ms, float)
        if np.any(self.times_ms <= 0):
            raise ValueError("frame times must be positive")

    @property
    def mean(self) -> float:
        return float(self.times_ms.mean()) if len(self.times_ms) else 0.0

    @property
    def peak_window_mean(self) -> float:
        t = self.times_ms
        if len(t) == 0:
            return 0.0
        w = min(self.window, len(t))
        return float(np.convolve(t, np.ones(w) / w, mode="valid").max())

    def to_text(self) -> str:
        return (f"frames {len(self.times_ms)}\nmean_ms {self.mean:.3f}\n"
                f"peak_window_mean_ms {self.peak_window_mean:.3f}\nwindow {self.window}\n")


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
