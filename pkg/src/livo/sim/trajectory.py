"""Analytic body trajectories: static hold, circular loop and a wall-parallel sweep."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

_H = 1e-5


def smoothstep(x):
    """Quintic ramp 0 -> 1 on [0, 1] with zero first and second derivatives at both ends."""
    x = np.clip(x, 0.0, 1.0)
    return x**3 * (10 - 15 * x + 6 * x * x)


def smoothstep_integral(x):
    """Integral of :func:`smoothstep` from 0 to x (x >= 0, continued linearly past 1)."""
    x = np.asarray(x, dtype=float)
    c = np.clip(x, 0.0, 1.0)
    return c**6 - 3 * c**5 + 2.5 * c**4 + np.maximum(x - 1.0, 0.0)


@dataclass
class TrajectorySpec:
    """Pose of the body (IMU) frame as a smooth function of time.

    ``kind`` selects the path:
      static  - constant pose at ``origin`` with heading ``yaw0``
      circle  - loop of ``radius`` around ``center`` at ``speed``, facing the center
      sweep   - back-and-forth translation along world y facing +x
    Motion ramps in after ``hold`` seconds over ``ramp`` seconds. Orientation
    wobbles (yaw, pitch, roll amplitudes in radians) and a vertical bob are
    scaled by the same ramp.
    """

    kind: str = "circle"
    duration: float = 60.0
    imu_rate: float = 200.0
    frame_rate: float = 10.0
    hold: float = 1.0
    ramp: float = 2.0
    speed: float = 1.0
    radius: float = 4.8
    center: tuple = (0.0, 0.0, 0.0)
    origin: tuple = (0.0, 0.0, 0.0)
    yaw0: float = 0.0
    sweep_amplitude: float = 1.5
    sweep_period: float = 8.0
    wobble: tuple = (0.15, 0.05, 0.03)
    wobble_periods: tuple = (4.3, 5.9, 7.1)
    bob: float = 0.1
    bob_period: float = 7.7
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("static", "circle", "sweep"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    # -- closed-form pose ------------------------------------------------------------
    def _ramp(self, t):
        return smoothstep((np.asarray(t, float) - self.hold) / self.ramp)

    def _euler(self, t):
        t = np.asarray(t, dtype=float)
        s = self._ramp(t) if self.kind != "static" else np.zeros_like(t)
        wob = [a * s * np.sin(2 * np.pi * (t - self.hold) / p)
               for a, p in zip(self.wobble, self.wobble_periods)]
        if self.kind == "circle":
            base = self._angle(t) + np.pi
        else:
            base = np.full_like(t, self.yaw0)
        return base + wob[0], wob[1], wob[2]

    def _angle(self, t):
        x = (np.asarray(t, float) - self.hold) / self.ramp
        dist = self.speed * self.ramp * smoothstep_integral(np.maximum(x, 0.0))
        return dist / self.radius

    def position(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c = np.asarray(self.center, float)
        o = np.asarray(self.origin, float)
        if self.kind == "static":
            return np.tile(o, (len(t), 1))
        s = self._ramp(t)
        bob = self.bob * s * np.sin(2 * np.pi * (t - self.hold) / self.bob_period)
        if self.kind == "circle":
            th = self._angle(t)
            return np.stack([c[0] + self.radius * np.cos(th), c[1] + self.radius * np.sin(th),
                             c[2] + bob], axis=1)
        y = self.sweep_amplitude * s * np.sin(2 * np.pi * (t - self.hold) / self.sweep_period)
        return np.stack([np.full_like(t, o[0]), o[1] + y, o[2] + bob], axis=1)

    def rotation(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        yaw, pitch, roll = self._euler(t)
        eul = np.stack(np.broadcast_arrays(yaw, pitch, roll), axis=1)
        return Rotation.from_euler("ZYX", eul).as_matrix()

    def pose(self, t):
        return self.rotation(t), self.position(t)

    # -- derivatives -------------------------------------------------------------------
    def velocity(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return (self.position(t + _H) - self.position(t - _H)) / (2 * _H)

    def acceleration(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        h = 1e-4
        return (self.position(t + h) - 2 * self.position(t) + self.position(t - h)) / (h * h)

    def body_rate(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        Ra, Rb = self.rotation(t - _H), self.rotation(t + _H)
        rel = np.einsum("nji,njk->nik", Ra, Rb)
        return Rotation.from_matrix(rel).as_rotvec() / (2 * _H)

    # -- sample clocks -----------------------------------------------------------------
    def imu_times(self) -> np.ndarray:
        n = int(np.floor(self.duration * self.imu_rate + 1e-9)) + 1
        return np.arange(n) / self.imu_rate

    def frame_times(self) -> np.ndarray:
        n = int(np.floor(self.duration * self.frame_rate + 1e-9))
        return (np.arange(n) + 1) / self.frame_rate


def circle_loop(duration: float = 60.0, radius: float = 4.8, speed: float = 1.0) -> TrajectorySpec:
    return TrajectorySpec(kind="circle", duration=duration, radius=radius, speed=speed)


def wall_sweep(duration: float = 30.0) -> TrajectorySpec:
    return TrajectorySpec(kind="sweep", duration=duration, wobble=(0.12, 0.05, 0.03))


def static_hold(duration: float = 10.0) -> TrajectorySpec:
    return TrajectorySpec(kind="static", duration=duration)
