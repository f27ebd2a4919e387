"""Named synthetic scenarios and the dataset directory writer."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import so3
from ..image import PinholeCamera, write_gray
from ..state import Extrinsics, make_transform
from .sensors import (ImuNoise, LidarPattern, LidarSimNoise, exposure_factor, simulate_image,
                      simulate_imu, simulate_lidar)
from .trajectory import TrajectorySpec, circle_loop, static_hold, wall_sweep
from .world import SyntheticWorld, box_room, single_wall

log = logging.getLogger(__name__)

DEFAULT_CAMERA = PinholeCamera(240.0, 240.0, 159.5, 119.5, 320, 240)
# camera z along body x, camera x along -body y, camera y along -body z
R_CAM_IMU = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
DEFAULT_EXTRINSICS = Extrinsics(
    lidar_to_imu=make_transform(so3.exp([0.0, 0.0, 0.02]), [0.04, 0.01, 0.06]),
    imu_to_camera=make_transform(R_CAM_IMU, [0.0, -0.05, 0.02]))


@dataclass
class SimConfig:
    """Everything that determines a synthetic dataset (together with the seed)."""

    scenario: str = "loop"
    seed: int = 0
    duration: float | None = None
    noise: bool = True
    exposure_amplitude: float | None = None
    exposure_period: float | None = None
    image_noise: float = 1.0
    imu_mode: str = "interval"
    lidar_cols: int = 64
    lidar_rows: int = 48
    supersample: int = 2
    extra: dict = field(default_factory=dict)


@dataclass
class Scenario:
    world: SyntheticWorld
    trajectory: TrajectorySpec
    exposure_amplitude: float
    exposure_period: float


def build_scenario(cfg: SimConfig) -> Scenario:
    name = cfg.scenario
    if name == "loop":
        world, traj, amp, period = box_room(cfg.seed), circle_loop(60.0), 0.2, 7.0
    elif name == "exposure":
        world, traj, amp, period = box_room(cfg.seed), circle_loop(30.0), 0.3, 5.0
    elif name == "wall":
        world, traj, amp, period = single_wall(cfg.seed), wall_sweep(30.0), 0.0, 5.0
    elif name == "static":
        world = box_room(cfg.seed)
        traj = static_hold(10.0)
        traj.origin = (4.8, 0.0, 0.0)
        traj.yaw0 = np.pi
        amp, period = 0.0, 5.0
    else:
        raise ValueError(f"unknown scenario {name!r}; choose loop, exposure, wall or static")
    if cfg.duration is not None:
        traj.duration = float(cfg.duration)
    if cfg.exposure_amplitude is not None:
        amp = float(cfg.exposure_amplitude)
    if cfg.exposure_period is not None:
        period = float(cfg.exposure_period)
    return Scenario(world, traj, amp, period)


def _tum_lines(times, R, p):
    q = np.array([so3.to_quaternion(r) for r in R])
    return [f"{t:.9f} {x:.9f} {y:.9f} {z:.9f} {a:.9f} {b:.9f} {c:.9f} {d:.9f}"
            for t, (x, y, z), (a, b, c, d) in zip(times, p, q)]


def write_calibration(path: Path, cam: PinholeCamera, ext: Extrinsics) -> None:
    def flat(T):
        return " ".join(f"{v:.12g}" for v in np.asarray(T).ravel())

    lines = [
        "# width height fx fy cx cy",
        f"camera = {cam.width} {cam.height} {cam.fx:.12g} {cam.fy:.12g} {cam.cx:.12g} {cam.cy:.12g}",
        "# 4x4 row-major rigid transforms",
        f"lidar_to_imu = {flat(ext.lidar_to_imu)}",
        f"imu_to_camera = {flat(ext.imu_to_camera)}",
    ]
    path.write_text("\n".join(lines) + "\n")


def write_dataset(out_dir, cfg: SimConfig, cam: PinholeCamera = DEFAULT_CAMERA,
                  ext: Extrinsics = DEFAULT_EXTRINSICS) -> dict:
    """Simulate all streams and write the dataset directory; returns a summary."""
    out = Path(out_dir)
    (out / "lidar").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    sc = build_scenario(cfg)
    traj = sc.trajectory
    imu_noise = ImuNoise() if cfg.noise else ImuNoise.none()
    lidar_noise = LidarSimNoise() if cfg.noise else LidarSimNoise.none()
    image_noise = cfg.image_noise if cfg.noise else 0.0
    pattern = LidarPattern(cfg.lidar_cols, cfg.lidar_rows)

    imu, bg, ba = simulate_imu(traj, imu_noise, cfg.seed, mode=cfg.imu_mode)
    with open(out / "imu.csv", "w") as f:
        f.write("t,wx,wy,wz,ax,ay,az\n")
        np.savetxt(f, np.c_[imu.t, imu.gyro, imu.accel], delimiter=",",
                   fmt=["%.9f"] + ["%.12e"] * 6)

    frame_t = traj.frame_times()
    expo = exposure_factor(frame_t, sc.exposure_amplitude, sc.exposure_period)
    n_points = 0
    prev = 0.0
    for k, t in enumerate(frame_t):
        ts, pts, inten = simulate_lidar(sc.world, traj, prev, t, pattern, lidar_noise, ext,
                                        cfg.seed, k)
        with open(out / "lidar" / f"{k:06d}.csv", "w") as f:
            f.write("t,x,y,z,intensity\n")
            np.savetxt(f, np.c_[ts, pts, inten], delimiter=",",
                       fmt=["%.9f", "%.6f", "%.6f", "%.6f", "%.3f"])
        n_points += len(ts)
        img = simulate_image(sc.world, traj, t, cam, ext, expo[k], image_noise, cfg.seed, k,
                             cfg.supersample)
        write_gray(out / "images" / f"{k:06d}.pgm", img)
        prev = t
    with open(out / "images" / "times.csv", "w") as f:
        f.write("k,t\n")
        for k, t in enumerate(frame_t):
            f.write(f"{k},{t:.9f}\n")

    write_calibration(out / "calib.txt", cam, ext)
    R, p = traj.pose(frame_t)
    (out / "gt_traj.txt").write_text("\n".join(_tum_lines(frame_t, R, p)) + "\n")
    Ri, pi = traj.pose(imu.t)
    vi = traj.velocity(imu.t)
    q = np.array([so3.to_quaternion(r) for r in Ri])
    with open(out / "gt_state.csv", "w") as f:
        f.write("t,px,py,pz,qx,qy,qz,qw,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz\n")
        np.savetxt(f, np.c_[imu.t, pi, q, vi, bg, ba], delimiter=",", fmt="%.9f")
    with open(out / "gt_exposure.csv", "w") as f:
        f.write("k,t,exposure\n")
        for k, (t, e) in enumerate(zip(frame_t, expo)):
            f.write(f"{k},{t:.9f},{e:.9f}\n")
    with open(out / "gt_planes.csv", "w") as f:
        f.write("cx,cy,cz,nx,ny,nz,ux,uy,uz,half_u,half_v\n")
        for r in sc.world.rects:
            f.write(",".join(f"{v:.9f}" for v in (*r.center, *r.normal, *r.u, *r.half)) + "\n")
    summary = {"frames": len(frame_t), "imu_samples": len(imu), "lidar_points": n_points,
               "config": asdict(cfg)}
    log.info("wrote %d frames, %d IMU samples, %d LiDAR points to %s",
             len(frame_t), len(imu), n_points, out)
    return summary
