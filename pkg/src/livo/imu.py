"""IMU-driven propagation, motion compensation and scan recombination."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import so3
from .state import BA, BG, DIM, EXPO, GRAV, POS, ROT, VEL, NavState, NoiseConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class ImuData:
    """A time-ordered IMU stream stored column-wise."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.accel)):
            raise ValueError("IMU columns have different lengths")

    @classmethod
    def from_samples(cls, samples) -> "ImuData":
        samples = list(samples)
        return cls(np.array([s.timestamp for s in samples]),
                   np.array([s.gyro for s in samples]),
                   np.array([s.accel for s in samples]))

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i) -> ImuSample:
        return ImuSample(float(self.t[i]), self.gyro[i], self.accel[i])

    def check_monotonic(self) -> None:
        bad = np.nonzero(np.diff(self.t) <= 0)[0]
        if len(bad):
            i = int(bad[0])
            raise ValueError(f"IMU timestamps not strictly increasing at index {i + 1}: "
                             f"{self.t[i]!r} -> {self.t[i + 1]!r}")

    def window(self, t0: float, t1: float) -> "ImuData":
        """Samples in (t0, t1] plus the last sample at or before t0 (held input)."""
        lo = max(int(np.searchsorted(self.t, t0, side="right")) - 1, 0)
        hi = int(np.searchsorted(self.t, t1, side="right"))
        return ImuData(self.t[lo:hi], self.gyro[lo:hi], self.accel[lo:hi])


def _segments(imu: ImuData, t_start: float, t_end: float):
    """Yield (t_a, dt, sample_index) covering [t_start, t_end] with zero-order hold."""
    inner = imu.t[(imu.t > t_start) & (imu.t < t_end)]
    bounds = np.concatenate([[t_start], inner, [t_end]])
    idx = np.searchsorted(imu.t, bounds[:-1], side="right") - 1
    idx = np.clip(idx, 0, len(imu.t) - 1)
    for a, b, i in zip(bounds[:-1], bounds[1:], idx):
        if b > a:
            yield float(a), float(b - a), int(i)


def step(state: NavState, omega: np.ndarray, acc: np.ndarray, dt: float) -> NavState:
    """One discrete transition with zero process noise."""
    w = omega - state.gyro_bias
    a_world = state.rotation @ (acc - state.accel_bias) + state.gravity
    return state.replace(
        rotation=state.rotation @ so3.exp(w * dt),
        position=state.position + state.velocity * dt + 0.5 * a_world * dt * dt,
        velocity=state.velocity + a_world * dt,
    )


def step_jacobians(state: NavState, omega: np.ndarray, acc: np.ndarray, dt: float):
    """Error-state transition F (19x19) and noise map G (19x13) for one step.

    Noise ordering: n_g, n_a, n_bg, n_ba, n_tau.
    """
    R = state.rotation
    phi = (omega - state.gyro_bias) * dt
    a_b = acc - state.accel_bias
    Ra_skew = R @ so3.skew(a_b)
    Jr = so3.right_jacobian(phi)

    F = np.eye(DIM)
    F[ROT, ROT] = so3.exp(-phi)
    F[ROT, BG] = -Jr * dt
    F[POS, ROT] = -0.5 * dt * dt * Ra_skew
    F[POS, VEL] = np.eye(3) * dt
    F[POS, BA] = -0.5 * dt * dt * R
    F[POS, GRAV] = 0.5 * dt * dt * np.eye(3)
    F[VEL, ROT] = -dt * Ra_skew
    F[VEL, BA] = -dt * R
    F[VEL, GRAV] = dt * np.eye(3)

    G = np.zeros((DIM, 13))
    G[ROT, 0:3] = -Jr * dt
    G[POS, 3:6] = -0.5 * dt * dt * R
    G[VEL, 3:6] = -dt * R
    G[BG, 6:9] = np.eye(3) * dt
    G[BA, 9:12] = np.eye(3) * dt
    G[EXPO, 12] = dt
    return F, G


def _noise_cov(noise: NoiseConfig, dt: float) -> np.ndarray:
    # discrete white-noise variance of a density sigma held over dt is sigma^2 / dt
    dens = np.concatenate([
        np.full(3, noise.gyro_noise_density), np.full(3, noise.accel_noise_density),
        np.full(3, noise.gyro_bias_walk), np.full(3, noise.accel_bias_walk),
        [noise.exposure_walk]])
    return np.diag(dens**2 / dt)


def forward_propagate(state: NavState, cov: np.ndarray, imu: ImuData, noise: NoiseConfig,
                      t_start: float | None = None, t_end: float | None = None,
                      return_path: bool = False):
    """Propagate state and covariance through an IMU span.

    Each sample's readings are held constant until the next sample. ``t_start``
    and ``t_end`` default to the first and last sample times.
    """
    if len(imu) == 0:
        raise ValueError("empty IMU span")
    imu.check_monotonic()
    t_start = float(imu.t[0]) if t_start is None else float(t_start)
    t_end = float(imu.t[-1]) if t_end is None else float(t_end)
    if t_end < t_start:
        raise ValueError(f"t_end {t_end} precedes t_start {t_start}")
    P = np.array(cov, dtype=float)
    path = [(t_start, state)]
    for t_a, dt, i in _segments(imu, t_start, t_end):
        om, acc = imu.gyro[i], imu.accel[i]
        F, G = step_jacobians(state, om, acc, dt)
        state = step(state, om, acc, dt)
        P = F @ P @ F.T + G @ _noise_cov(noise, dt) @ G.T
        path.append((t_a + dt, state))
    P = 0.5 * (P + P.T)
    if return_path:
        return state, P, path
    return state, P


def _backward_step(state: NavState, omega, acc, dt) -> NavState:
    """Exact inverse of :func:`step` (recovers the segment-start state)."""
    w = omega - state.gyro_bias
    R_a = state.rotation @ so3.exp(-w * dt)
    a_world = R_a @ (acc - state.accel_bias) + state.gravity
    v_a = state.velocity - a_world * dt
    p_a = state.position - v_a * dt - 0.5 * a_world * dt * dt
    return state.replace(rotation=R_a, position=p_a, velocity=v_a)


def backward_compensate(points: np.ndarray, times: np.ndarray, end_state: NavState,
                        imu: ImuData, t_end: float, extrinsics=None):
    """Re-express LiDAR-frame points as if all were measured at ``t_end``.

    Returns ``(points_out, keep_mask)``; points with timestamps outside the IMU
    coverage are dropped.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    times = np.asarray(times, dtype=float)
    if extrinsics is None:
        R_il, t_il = np.eye(3), np.zeros(3)
    else:
        R_il, t_il = extrinsics.R_il, extrinsics.t_il
    t_lo = float(imu.t[0]) if len(imu) else t_end
    keep = (times >= t_lo) & (times <= t_end)
    if (~keep).any():
        log.warning("backward_compensate: dropped %d points outside IMU span", int((~keep).sum()))
    pts, tj = points[keep], times[keep]
    out = pts.copy()
    if len(pts) == 0:
        return out, keep
    t_min = float(tj.min())
    segs = list(_segments(imu, min(t_min, t_end), t_end))
    # integrate backwards from the scan end, remembering each segment-start state
    starts = [None] * len(segs)
    s = end_state
    for k in range(len(segs) - 1, -1, -1):
        t_a, dt, i = segs[k]
        s = _backward_step(s, imu.gyro[i], imu.accel[i], dt)
        starts[k] = s
    seg_t = np.array([sg[0] for sg in segs])
    which = np.clip(np.searchsorted(seg_t, tj, side="right") - 1, 0, len(segs) - 1)
    p_imu = pts @ R_il.T + t_il
    Re, pe = end_state.rotation, end_state.position
    moving = tj < t_end
    for k in np.unique(which[moving]):
        sel = moving & (which == k)
        t_a, _, i = segs[k]
        sa = starts[k]
        tau = tj[sel] - t_a
        w = imu.gyro[i] - sa.gyro_bias
        a_world = sa.rotation @ (imu.accel[i] - sa.accel_bias) + sa.gravity
        Rj = sa.rotation @ so3.exp_batch(np.outer(tau, w))
        pj = sa.position + np.outer(tau, sa.velocity) + 0.5 * np.outer(tau * tau, a_world)
        world = np.einsum("nij,nj->ni", Rj, p_imu[sel]) + pj
        out[sel] = ((world - pe) @ Re - t_il) @ R_il
    return out, keep


def recombine_scans(times: np.ndarray, camera_times: np.ndarray):
    """Partition point timestamps into camera intervals (t_{k-1}, t_k].

    The first interval is taken as (t_0 - (t_1 - t_0), t_0]. Returns a list of
    index arrays (one per camera time) and the number of dropped points.
    """
    times = np.asarray(times, dtype=float)
    cam = np.asarray(camera_times, dtype=float)
    if len(cam) == 0:
        return [], len(times)
    if np.any(np.diff(cam) <= 0):
        raise ValueError("camera timestamps must be strictly increasing")
    if len(times) and np.any(np.diff(times) < 0):
        raise ValueError("point timestamps must be time-ordered")
    period = cam[1] - cam[0] if len(cam) > 1 else np.inf
    k = np.searchsorted(cam, times, side="left")
    valid = (k < len(cam)) & (times > cam[0] - period)
    dropped = int((~valid).sum())
    if dropped:
        log.warning("recombine_scans: dropped %d points outside camera intervals", dropped)
    order = np.arange(len(times))
    scans = [order[valid & (k == i)] for i in range(len(cam))]
    return scans, dropped


def initial_state(imu: ImuData, duration: float = 0.5) -> NavState:
    """Identity pose, zero velocity/biases, gravity from the stationary average."""
    sel = imu.t <= imu.t[0] + duration
    g = -imu.accel[sel].mean(axis=0)
    return NavState(gravity=g, inv_exposure=1.0)


def initial_covariance(exposure_fixed: bool = True) -> np.ndarray:
    P = np.zeros((DIM, DIM))
    d = np.zeros(DIM)
    d[ROT] = 1e-8
    d[POS] = 1e-8
    d[VEL] = 1e-4
    d[BG] = 1e-4
    d[BA] = 1e-3
    d[GRAV] = 1e-4
    d[EXPO] = 0.0 if exposure_fixed else 1e-2
    P[np.diag_indices(DIM)] = d
    return P
