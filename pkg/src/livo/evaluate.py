"""Trajectory accuracy metrics against ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


MIN_ALIGN_SPREAD = 1e-3  # [m] RMS extent along the main principal axis


class EvaluationError(ValueError):
    pass


def associate(t_est, t_gt, max_dt: float = 0.005):
    """Index pairs (i_est, i_gt) matching each estimate to the nearest truth within ``max_dt``."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if len(t_est) == 0 or len(t_gt) == 0:
        raise EvaluationError("empty trajectory")
    pos = np.clip(np.searchsorted(t_gt, t_est), 1, max(len(t_gt) - 1, 1))
    lo = np.clip(pos - 1, 0, len(t_gt) - 1)
    hi = np.clip(pos, 0, len(t_gt) - 1)
    nearest = np.where(np.abs(t_gt[lo] - t_est) <= np.abs(t_gt[hi] - t_est), lo, hi)
    ok = np.abs(t_gt[nearest] - t_est) <= max_dt
    if not ok.any():
        raise EvaluationError(f"no timestamps overlap within {max_dt * 1e3:.1f} ms")
    return np.nonzero(ok)[0], nearest[ok]


def align_rigid(src: np.ndarray, dst: np.ndarray):
    """Rotation R and translation t minimizing sum |dst - (R src + t)|^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    # rotation is meaningless for a path that stays in place; align translation only
    spread = np.linalg.svd(src - mu_s, compute_uv=False) / np.sqrt(max(len(src), 1))
    if len(src) < 2 or spread[0] < MIN_ALIGN_SPREAD:
        R = np.eye(3)
    else:
        # SVD solution; for collinear paths the roll about the line is arbitrary but harmless
        U, _, Vt = np.linalg.svd((src - mu_s).T @ (dst - mu_d))
        d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
        R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mu_d - R @ mu_s


@dataclass
class AteResult:
    rmse: float
    residuals: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    matched: int


def evaluate_ate(t_est, p_est, t_gt, p_gt, max_dt: float = 0.005) -> AteResult:
    """Absolute trajectory error after rigid alignment of associated positions."""
    i, j = associate(t_est, t_gt, max_dt)
    src = np.asarray(p_est, dtype=float)[i]
    dst = np.asarray(p_gt, dtype=float)[j]
    R, t = align_rigid(src, dst)
    res = dst - (src @ R.T + t)
    rmse = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
    return AteResult(rmse, res, R, t, len(i))


def anchored_positions(R_est, p_est, R_gt0, p_gt0):
    """Estimated positions mapped into the truth frame through the first pose."""
    R_est = np.asarray(R_est, dtype=float)
    p_est = np.asarray(p_est, dtype=float)
    R_a = R_gt0 @ R_est[0].T
    return (p_est - p_est[0]) @ R_a.T + p_gt0


def end_drift(t_est, R_est, p_est, t_gt, R_gt, p_gt, max_dt: float = 0.005) -> float:
    """Final position error with both trajectories anchored at their first associated pose."""
    i, j = associate(t_est, t_gt, max_dt)
    anchored = anchored_positions(np.asarray(R_est)[i], np.asarray(p_est)[i],
                                  np.asarray(R_gt)[j[0]], np.asarray(p_gt)[j[0]])
    return float(np.linalg.norm(anchored[-1] - np.asarray(p_gt)[j[-1]]))


def max_drift(t_est, R_est, p_est, t_gt, R_gt, p_gt, max_dt: float = 0.005) -> float:
    """Largest anchored position error along the whole run."""
    i, j = associate(t_est, t_gt, max_dt)
    anchored = anchored_positions(np.asarray(R_est)[i], np.asarray(p_est)[i],
                                  np.asarray(R_gt)[j[0]], np.asarray(p_gt)[j[0]])
    return float(np.linalg.norm(anchored - np.asarray(p_gt)[j], axis=1).max())


def relative_inverse_exposure(inv_exposure, exposure):
    """Estimated and true inverse exposure, both relative to the first frame."""
    est = np.asarray(inv_exposure, dtype=float)
    truth = 1.0 / np.asarray(exposure, dtype=float)
    if len(est) != len(truth) or len(est) == 0:
        raise EvaluationError("exposure series lengths differ or are empty")
    return est / est[0], truth / truth[0]


def exposure_rmse(inv_exposure, exposure) -> float:
    """RMS relative error of the frame-0-anchored inverse exposure estimate."""
    est, truth = relative_inverse_exposure(inv_exposure, exposure)
    return float(np.sqrt(np.mean((est / truth - 1.0) ** 2)))
