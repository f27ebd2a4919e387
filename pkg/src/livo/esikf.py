"""Iterated error-state Kalman update and the LiDAR-then-visual sequential update."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .state import DIM, NavState, boxminus, boxplus

log = logging.getLogger(__name__)


class UpdateError(RuntimeError):
    pass


@dataclass
class MeasurementBatch:
    """Stacked residuals, Jacobian rows (m x 19) and per-row noise variances."""

    residuals: np.ndarray
    jacobian: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        self.residuals = np.asarray(self.residuals, dtype=float).reshape(-1)
        self.jacobian = np.asarray(self.jacobian, dtype=float).reshape(-1, DIM)
        self.noise = np.broadcast_to(np.asarray(self.noise, dtype=float),
                                     self.residuals.shape).copy()
        if not (len(self.residuals) == len(self.jacobian) == len(self.noise)):
            raise ValueError("residual, jacobian and noise row counts differ")
        if np.any(self.noise <= 0):
            raise ValueError("measurement noise must be positive")

    @classmethod
    def empty(cls) -> "MeasurementBatch":
        return cls(np.zeros(0), np.zeros((0, DIM)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.residuals)

    @staticmethod
    def stack(batches: Sequence["MeasurementBatch"]) -> "MeasurementBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return MeasurementBatch.empty()
        return MeasurementBatch(np.concatenate([b.residuals for b in batches]),
                                np.vstack([b.jacobian for b in batches]),
                                np.concatenate([b.noise for b in batches]))


@dataclass
class UpdateReport:
    iterations: int = 0
    final_step_norm: float = 0.0
    converged: bool = True
    residual_rms: list = field(default_factory=list)
    rows: int = 0


MeasurementModel = Callable[[NavState], MeasurementBatch]


def iterated_update(state: NavState, cov: np.ndarray, model: MeasurementModel,
                    max_iters: int = 5, eps: float = 1e-3,
                    update_covariance: bool = True, init: NavState | None = None):
    """Iterate the error-state update to convergence.

    ``state`` and ``cov`` are the prior; ``init`` optionally seeds the first
    iterate (defaults to the prior mean).

    Uses the information form K = (H^T R^-1 H + P^-1)^-1 H^T R^-1, so the
    posterior covariance (I - K H) P equals the inverse normal matrix.
    Error-state coordinates with zero prior variance are held fixed.
    """
    report = UpdateReport()
    cov = np.asarray(cov, dtype=float)
    free = np.diag(cov) > 0
    if not free.any():
        return state, cov.copy(), report
    Pf = cov[np.ix_(free, free)]
    try:
        prior_info = cho_solve(cho_factor(Pf), np.eye(int(free.sum())))
    except LinAlgError as exc:
        raise UpdateError("prior covariance is not positive definite") from exc

    x = state if init is None else init
    S = None
    for it in range(max_iters):
        batch = model(x)
        if len(batch) == 0:
            break
        H = batch.jacobian[:, free]
        w = 1.0 / batch.noise
        HtW = H.T * w
        HtWH = HtW @ H
        HtWz = HtW @ batch.residuals
        S = HtWH + prior_info
        try:
            chol = cho_factor(S)
        except LinAlgError as exc:
            raise UpdateError("singular normal matrix in iterated update") from exc
        dx = boxminus(x, state)[free]
        delta = np.zeros(DIM)
        delta[free] = -dx + cho_solve(chol, HtWH @ dx - HtWz)
        x = boxplus(x, delta)
        report.iterations = it + 1
        report.rows = len(batch)
        report.residual_rms.append(float(np.sqrt(np.mean(batch.residuals**2))))
        report.final_step_norm = float(np.linalg.norm(delta))
        report.converged = report.final_step_norm < eps
        if report.converged:
            break

    if S is None or not update_covariance:
        return x, cov.copy(), report
    post = np.zeros_like(cov)
    Pf_post = cho_solve(cho_factor(S), np.eye(len(S)))
    post[np.ix_(free, free)] = 0.5 * (Pf_post + Pf_post.T)
    return x, post, report


def sequential_update(state: NavState, cov: np.ndarray, lidar_model: MeasurementModel | None,
                      visual_models=(), lidar_iters: int = 5, visual_iters: int = 3,
                      eps: float = 1e-3):
    """LiDAR update followed by per-level visual updates (coarsest level first).

    ``visual_models`` is either a sequence of per-level models or a callable
    ``(state, cov) -> sequence`` invoked with the LiDAR posterior, so the
    visual stage can be assembled after the map has seen the registered scan.
    Each visual level starts from the previous level's converged state; only
    the last level updates the covariance.
    """
    reports = []
    if lidar_model is not None:
        state, cov, rep = iterated_update(state, cov, lidar_model, lidar_iters, eps)
        reports.append(rep)
    if callable(visual_models):
        visual_models = visual_models(state, cov)
    visual_models = list(visual_models or ())
    last = len(visual_models) - 1
    x = state
    final_cov = cov
    for lvl, model in enumerate(visual_models):
        x, c, rep = iterated_update(state, cov, model, visual_iters, eps,
                                    update_covariance=(lvl == last), init=x)
        reports.append(rep)
        if lvl == last:
            final_cov = c
    return x, final_cov, reports
