"""Navigation state on SO(3) x R^16 and the retraction operators."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import so3

DIM = 19
ROT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)
GRAV = slice(15, 18)
EXPO = 18

MIN_INV_EXPOSURE = 1e-4


@dataclass(frozen=True)
class NavState:
    """Body (IMU) frame state expressed in the global frame.

    ``inv_exposure`` is the inverse camera exposure time relative to the
    first frame.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    inv_exposure: float = 1.0

    def replace(self, **kw) -> "NavState":
        return replace(self, **kw)

    def vector_part(self) -> np.ndarray:
        """The 16 Euclidean coordinates, in error-state order."""
        return np.concatenate([self.position, self.velocity, self.gyro_bias,
                               self.accel_bias, self.gravity, [self.inv_exposure]])

    def validate(self, tol: float = 1e-9) -> None:
        if not so3.is_rotation(self.rotation, tol):
            raise ValueError("rotation is not orthonormal with det +1")
        if not self.inv_exposure > 0:
            raise ValueError("inv_exposure must be positive")

    def pose_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T


def boxplus(state: NavState, delta: np.ndarray) -> NavState:
    delta = np.asarray(delta, dtype=float)
    if not np.all(np.isfinite(delta)):
        raise ValueError("delta must be finite")
    if not delta.any():
        return state
    return NavState(
        rotation=state.rotation @ so3.exp(delta[ROT]),
        position=state.position + delta[POS],
        velocity=state.velocity + delta[VEL],
        gyro_bias=state.gyro_bias + delta[BG],
        accel_bias=state.accel_bias + delta[BA],
        gravity=state.gravity + delta[GRAV],
        inv_exposure=max(state.inv_exposure + float(delta[EXPO]), MIN_INV_EXPOSURE),
    )


def boxminus(a: NavState, b: NavState) -> np.ndarray:
    out = np.empty(DIM)
    out[ROT] = so3.log(b.rotation.T @ a.rotation)
    out[POS] = a.position - b.position
    out[VEL] = a.velocity - b.velocity
    out[BG] = a.gyro_bias - b.gyro_bias
    out[BA] = a.accel_bias - b.accel_bias
    out[GRAV] = a.gravity - b.gravity
    out[EXPO] = a.inv_exposure - b.inv_exposure
    return out


def check_covariance(P: np.ndarray, tol: float = 1e-9) -> None:
    if P.shape != (DIM, DIM):
        raise ValueError(f"covariance must be {DIM}x{DIM}, got {P.shape}")
    scale = max(1.0, float(np.abs(P).max()))
    if not np.allclose(P, P.T, atol=tol * scale):
        raise ValueError("covariance is not symmetric")
    if np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -tol * scale:
        raise ValueError("covariance is not positive semi-definite")


@dataclass(frozen=True)
class NoiseConfig:
    """Continuous-time noise densities (SI units)."""

    gyro_noise_density: float = 2e-3
    accel_noise_density: float = 2e-2
    gyro_bias_walk: float = 2e-5
    accel_bias_walk: float = 5e-4
    exposure_walk: float = 0.3

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Extrinsics:
    """Rigid transforms: LiDAR -> IMU and IMU -> camera, as 4x4 matrices."""

    lidar_to_imu: np.ndarray = field(default_factory=lambda: np.eye(4))
    imu_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        for T in (self.lidar_to_imu, self.imu_to_camera):
            if T.shape != (4, 4) or not so3.is_rotation(T[:3, :3], 1e-6):
                raise ValueError("extrinsic rotation block must be orthonormal")

    @property
    def R_il(self) -> np.ndarray:
        return self.lidar_to_imu[:3, :3]

    @property
    def t_il(self) -> np.ndarray:
        return self.lidar_to_imu[:3, 3]

    @property
    def R_ci(self) -> np.ndarray:
        return self.imu_to_camera[:3, :3]

    @property
    def t_ci(self) -> np.ndarray:
        return self.imu_to_camera[:3, 3]


def make_transform(R: np.ndarray, t) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T
