"""Synthetic IMU, LiDAR and camera streams driven by an analytic trajectory."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..image import PinholeCamera
from ..imu import ImuData
from ..state import Extrinsics
from .rng import CAMERA_STREAM, IMU_STREAM, LIDAR_STREAM, stream_rng
from .trajectory import TrajectorySpec
from .world import SyntheticWorld, render_image

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class ImuNoise:
    """Continuous-time densities plus constant initial biases of the simulated IMU."""

    gyro_density: float = 5e-4
    accel_density: float = 5e-3
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4
    gyro_bias: tuple = (0.003, -0.002, 0.004)
    accel_bias: tuple = (0.05, -0.03, 0.04)

    @classmethod
    def none(cls) -> "ImuNoise":
        return cls(0.0, 0.0, 0.0, 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


def simulate_imu(traj: TrajectorySpec, noise: ImuNoise | None = None, seed: int = 0,
                 gravity=GRAVITY, mode: str = "interval", times=None):
    """Gyro and accelerometer readings along ``traj``.

    ``interval`` mode reports, for sample i, the constant rate and specific
    force that carry the true pose from t_i to t_{i+1} under a zero-order hold,
    so noise-free propagation reproduces the trajectory to integration
    round-off. ``instant`` mode reports the instantaneous values.
    Returns (ImuData, gyro_bias (N,3), accel_bias (N,3)).
    """
    noise = noise or ImuNoise.none()
    t = traj.imu_times() if times is None else np.asarray(times, float)
    g = np.asarray(gravity, float)
    n = len(t)
    if mode == "interval":
        dt = np.diff(t)
        dt = np.append(dt, dt[-1] if len(dt) else 1.0 / traj.imu_rate)
        R0 = traj.rotation(t)
        R1 = traj.rotation(t + dt)
        rel = np.einsum("nji,njk->nik", R0, R1)
        gyro = Rotation.from_matrix(rel).as_rotvec() / dt[:, None]
        a_world = (traj.velocity(t + dt) - traj.velocity(t)) / dt[:, None]
    elif mode == "instant":
        R0 = traj.rotation(t)
        gyro = traj.body_rate(t)
        a_world = traj.acceleration(t)
    else:
        raise ValueError(f"unknown IMU sampling mode {mode!r}")
    accel = np.einsum("nji,nj->ni", R0, a_world - g)
    bg = np.tile(np.asarray(noise.gyro_bias, float), (n, 1))
    ba = np.tile(np.asarray(noise.accel_bias, float), (n, 1))
    if n > 1 and (noise.gyro_density or noise.accel_density or noise.gyro_walk or noise.accel_walk):
        rng = stream_rng(seed, IMU_STREAM, 0)
        step = np.diff(t, prepend=t[0])
        w = rng.standard_normal((n, 12))
        bg += np.cumsum(noise.gyro_walk * np.sqrt(step)[:, None] * w[:, 0:3], axis=0)
        ba += np.cumsum(noise.accel_walk * np.sqrt(step)[:, None] * w[:, 3:6], axis=0)
        h = np.median(np.diff(t))
        gyro = gyro + noise.gyro_density / np.sqrt(h) * w[:, 6:9]
        accel = accel + noise.accel_density / np.sqrt(h) * w[:, 9:12]
    return ImuData(t, gyro + bg, accel + ba), bg, ba


@dataclass
class LidarPattern:
    """Raster of rays over a forward field of view (LiDAR x axis forward)."""

    cols: int = 64
    rows: int = 48
    h_fov_deg: float = 90.0
    v_fov_deg: float = 70.0

    def directions(self) -> np.ndarray:
        """Unit ray directions in scan order (column by column)."""
        az = np.radians(np.linspace(-self.h_fov_deg / 2, self.h_fov_deg / 2, self.cols))
        el = np.radians(np.linspace(-self.v_fov_deg / 2, self.v_fov_deg / 2, self.rows))
        A, E = np.meshgrid(az, el, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d.reshape(-1, 3)


@dataclass
class LidarSimNoise:
    range_sigma: float = 0.02
    bearing_sigma_deg: float = 0.05

    @classmethod
    def none(cls) -> "LidarSimNoise":
        return cls(0.0, 0.0)


def _perturb_directions(d: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma <= 0:
        return d
    a = np.cross(d, [0.0, 0.0, 1.0])
    bad = np.linalg.norm(a, axis=1) < 1e-6
    a[bad] = np.cross(d[bad], [1.0, 0.0, 0.0])
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = np.cross(d, a)
    e = rng.normal(0.0, sigma, (len(d), 2))
    out = d + e[:, :1] * a + e[:, 1:] * b
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def simulate_lidar(world: SyntheticWorld, traj: TrajectorySpec, t_start: float, t_end: float,
                   pattern: LidarPattern | None = None, noise: LidarSimNoise | None = None,
                   ext: Extrinsics | None = None, seed: int = 0, index: int = 0):
    """One sweep over (t_start, t_end]: returns (times, LiDAR-frame points, intensity).

    Ray j fires at t_start + (j+1)/N (t_end - t_start) from the sensor pose at
    that instant. Rays that miss the world produce no point.
    """
    pattern = pattern or LidarPattern()
    noise = noise or LidarSimNoise.none()
    ext = ext or Extrinsics()
    dirs = pattern.directions()
    n = len(dirs)
    times = t_start + (np.arange(n) + 1) / n * (t_end - t_start)
    R, p = traj.pose(times)
    R_wl = R @ ext.R_il
    origins = p + np.einsum("nij,j->ni", R, ext.t_il)
    dist, idx, s, tt = world.intersect(origins, np.einsum("nij,nj->ni", R_wl, dirs))
    hit = idx >= 0
    intensity = world.shade(idx, s, tt)
    rng = stream_rng(seed, LIDAR_STREAM, index)
    rng_noise = rng.normal(0.0, 1.0, n) * noise.range_sigma
    meas_dirs = _perturb_directions(dirs, np.radians(noise.bearing_sigma_deg), rng)
    rng_meas = dist + rng_noise
    pts = meas_dirs * rng_meas[:, None]
    keep = hit & (rng_meas > 0)
    return times[keep], pts[keep], intensity[keep]


def exposure_factor(t, amplitude: float = 0.0, period: float = 5.0) -> np.ndarray:
    """Multiplicative brightness applied to rendered images (1 means nominal)."""
    return 1.0 + amplitude * np.sin(2 * np.pi * np.asarray(t, float) / period)


def simulate_image(world: SyntheticWorld, traj: TrajectorySpec, t: float, cam: PinholeCamera,
                   ext: Extrinsics | None = None, exposure: float = 1.0, noise_sigma: float = 0.0,
                   seed: int = 0, index: int = 0, supersample: int = 2) -> np.ndarray:
    """8-bit-range raster at time ``t`` with optional additive pixel noise (not yet quantized)."""
    ext = ext or Extrinsics()
    R, p = traj.pose(t)
    R_cw = ext.R_ci @ R[0].T
    t_cw = ext.t_ci - R_cw @ p[0]
    img = render_image(world, R_cw, t_cw, cam, exposure, supersample)
    if noise_sigma > 0:
        img = img + stream_rng(seed, CAMERA_STREAM, index).normal(0.0, noise_sigma, img.shape)
    return np.clip(img, 0.0, 255.0)
