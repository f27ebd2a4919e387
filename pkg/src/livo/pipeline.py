"""Frame-by-frame odometry loop and the run driver that writes all outputs."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import so3
from .config import RunConfig
from .dataset import Calibration, Dataset, FrameBundle
from .esikf import UpdateReport, iterated_update, sequential_update
from .evaluate import EvaluationError, end_drift, evaluate_ate, exposure_rmse, max_drift
from .image import ImagePyramid, world_to_camera, write_rgb
from .imu import ImuData, backward_compensate, forward_propagate, initial_covariance, initial_state
from .lidar import LidarMeasurement, sensor_covariance, temporal_downsample, transform_to_global
from .patches import Candidates, NormalRefiner, generate_visual_points, update_reference
from .state import NavState
from .visual import VisualSubmap, anchor_exposure, build_submap, draw_overlay, visual_levels
from .voxelmap import VoxelMap, decode, encode, lattice

log = logging.getLogger(__name__)

LIDAR_STAGES = ("propagate", "undistort", "lidar_update", "map_update")
VISUAL_STAGES = ("visual_update", "generation")
TIMING_COLUMNS = LIDAR_STAGES + VISUAL_STAGES


@dataclass
class FrameLog:
    index: int
    time: float
    timings: dict = field(default_factory=dict)
    inv_exposure: float = 1.0
    lidar_rows: int = 0
    lidar_rms: float = float("nan")
    lidar_iters: int = 0
    visual_points: int = 0
    visual_rows: int = 0
    visual_rms: float = float("nan")
    rejected: int = 0
    raycast: int = 0
    new_points: int = 0
    scan_points: int = 0

    @property
    def lidar_ms(self) -> float:
        return sum(self.timings.get(k, 0.0) for k in LIDAR_STAGES)

    @property
    def visual_ms(self) -> float:
        return sum(self.timings.get(k, 0.0) for k in VISUAL_STAGES)


def _root_keys(points: np.ndarray, size: float) -> list:
    if len(points) == 0:
        return []
    codes = np.unique(encode(lattice(points, size)))
    return list(map(tuple, decode(codes).tolist()))


class _Stopwatch:
    def __init__(self, timings: dict):
        self.timings = timings

    def __call__(self, name: str):
        return _Lap(self.timings, name)


class _Lap:
    def __init__(self, timings, name):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + 1e3 * (time.perf_counter() - self.t0)


class Odometry:
    """LiDAR-inertial-visual estimator over a unified voxel map.

    Frame 0 only anchors the exposure and seeds the map; every later frame
    runs propagation, undistortion, the LiDAR iterated update, the visual
    per-level updates, map insertion and visual point maintenance.
    """

    def __init__(self, calib: Calibration, cfg: RunConfig | None = None,
                 init_imu: ImuData | None = None):
        self.cfg = cfg or RunConfig()
        self.cam = calib.camera
        self.ext = calib.extrinsics
        self.map = VoxelMap(self.cfg.voxel())
        self.noise = self.cfg.imu_noise()
        self.lidar_noise = self.cfg.lidar_noise()
        self.vcfg = self.cfg.visual()
        self.rcfg = self.cfg.raycast()
        self.gcfg = self.cfg.generation()
        if init_imu is not None and len(init_imu):
            self.state = initial_state(init_imu, self.cfg.gravity_init_duration)
            self.t = float(init_imu.t[0])
        else:
            self.state = NavState()
            self.t = None
        self.cov = initial_covariance(exposure_fixed=True)
        self.frame = 0
        self.previous_points: list = []
        self.last_submap: VisualSubmap | None = None
        self.refiner = (NormalRefiner(self.cam, threaded=self.cfg.threaded_refinement,
                                      patch_size=self.cfg.refine_patch_size)
                        if self.cfg.normal_refinement else None)

    def close(self) -> None:
        if self.refiner is not None:
            self.refiner.close()

    # -- one frame --------------------------------------------------------------------
    def process(self, bundle: FrameBundle, image: np.ndarray) -> FrameLog:
        cfg = self.cfg
        rec = FrameLog(bundle.index, bundle.time)
        lap = _Stopwatch(rec.timings)
        first = self.frame == 0
        with lap("propagate"):
            if self.t is None:
                self.t = float(bundle.imu.t[0]) if len(bundle.imu) else bundle.time
            if len(bundle.imu) and bundle.time > self.t:
                self.state, self.cov = forward_propagate(self.state, self.cov, bundle.imu,
                                                         self.noise, self.t, bundle.time)
            elif bundle.time > self.t:
                log.warning("frame %d: no IMU samples, holding the previous state", bundle.index)
            self.t = bundle.time
            if first or not cfg.exposure_estimation:
                self.cov = anchor_exposure(self.cov)
        with lap("undistort"):
            pts = np.zeros((0, 3))
            if len(bundle.points) and len(bundle.imu):
                pts, _ = backward_compensate(bundle.points, bundle.point_times, self.state,
                                             bundle.imu, bundle.time, self.ext)
            rec.scan_points = len(pts)
            if len(pts) == 0:
                log.warning("frame %d: empty LiDAR scan, coasting on IMU", bundle.index)
        with lap("lidar_update"):
            if not first and cfg.use_lidar and len(pts):
                ds = pts[temporal_downsample(len(pts), cfg.downsample_ratio)]
                model = LidarMeasurement(ds, self.map, self.ext, self.lidar_noise,
                                         prior_cov=self.cov, gate=cfg.lidar_gate)
                self.state, self.cov, rep = iterated_update(self.state, self.cov, model,
                                                            cfg.lidar_max_iters, cfg.eps)
                self._record(rec, rep, lidar=True)
        with lap("visual_update"):
            pyramid = ImagePyramid(image, cfg.pyramid_levels)
            if not first and cfg.use_visual:
                models = self._visual_models(pts, pyramid)
                self.state, self.cov, reps = sequential_update(
                    self.state, self.cov, None, models, visual_iters=cfg.visual_max_iters,
                    eps=cfg.eps)
                if reps:
                    self._record(rec, reps[-1], lidar=False)
                    rec.visual_rows = max(r.rows for r in reps)
                sub = self.last_submap
                if sub is not None:
                    rec.visual_points = len(sub.retained)
                    rec.rejected = len(sub.entries) - rec.visual_points
                    rec.raycast = sum(e.from_raycast for e in sub.retained)
        world = transform_to_global(pts, self.state, self.ext)
        with lap("generation"):
            colors = self._colors(world, pyramid)
        with lap("map_update"):
            touched = []
            if len(pts):
                R_wl = self.state.rotation @ self.ext.R_il
                covs = R_wl @ sensor_covariance(pts, self.lidar_noise) @ R_wl.T
                touched = self.map.insert_scan(world, covs, colors)
                lidar_pos = self.state.rotation @ self.ext.t_il + self.state.position
                self.map.update_geometry(touched, sensor_position=lidar_pos)
                self.map.slide_window(lidar_pos)
        with lap("generation"):
            if cfg.use_visual:
                rec.new_points = self._maintain_visual_points(world, pyramid)
        rec.inv_exposure = float(self.state.inv_exposure)
        self.frame += 1
        return rec

    def _record(self, rec: FrameLog, rep: UpdateReport, lidar: bool) -> None:
        rms = rep.residual_rms[-1] if rep.residual_rms else float("nan")
        if lidar:
            rec.lidar_rows, rec.lidar_rms, rec.lidar_iters = rep.rows, rms, rep.iterations
        else:
            rec.visual_rms = rms

    def _visual_models(self, pts_lidar: np.ndarray, pyramid: ImagePyramid):
        def build(state: NavState, cov):
            R_cw, t_cw = world_to_camera(state, self.ext)
            scan_world = transform_to_global(pts_lidar, state, self.ext)
            touched = _root_keys(scan_world, self.map.cfg.root_size)
            self.last_submap = build_submap(self.map, touched, self.previous_points, scan_world,
                                            self.cam, R_cw, t_cw, self.vcfg, self.rcfg)
            return visual_levels(self.last_submap.retained, pyramid, self.cam, self.ext,
                                 self.vcfg)

        self.last_submap = None
        return build

    def _colors(self, world: np.ndarray, pyramid: ImagePyramid) -> np.ndarray:
        """Exposure-normalized gray value of each point in the current image (NaN if unseen)."""
        R_cw, t_cw = world_to_camera(self.state, self.ext)
        out = np.full(len(world), np.nan)
        pc = world @ R_cw.T + t_cw
        front = np.nonzero(pc[:, 2] > 1e-3)[0]
        if len(front):
            vals, inside = pyramid.sample(0, self.cam.project(pc[front]))
            out[front[inside]] = self.state.inv_exposure * vals[inside]
        return out

    def _maintain_visual_points(self, world: np.ndarray, pyramid: ImagePyramid) -> int:
        R_cw, t_cw = world_to_camera(self.state, self.ext)
        tau = float(self.state.inv_exposure)
        existing, blocked = [], []
        entries = [] if self.last_submap is None else self.last_submap.entries
        if entries:
            pc = np.array([e.point.position for e in entries]) @ R_cw.T + t_cw
            front = pc[:, 2] > 1e-3
            uv = self.cam.project(np.where(front[:, None], pc, 1.0))
            for e, ok, u in zip(entries, front, uv):
                if not ok:
                    continue
                if e.rejected is None:
                    existing.append((e.point, u))
                elif e.rejected == "cell_occluded":
                    # the cell already has a landmark; do not stack another one on it
                    blocked.append(u)
        cand = Candidates.empty()
        if len(world):
            slots = self.map.query_planes(world)
            hit = slots >= 0
            if hit.any():
                index = self.map.plane_index()
                s = slots[hit]
                keys = lattice(world[hit], self.map.cfg.root_size)
                cand = Candidates(world[hit], index.normals[s], index.covs[s][:, :3, :3], keys)
        new, refreshed = generate_visual_points(pyramid, self.cam, R_cw, t_cw, tau, self.frame,
                                                cand, existing, self.gcfg, blocked)
        for vp in new:
            self.map.add_visual_point(vp)
        for vp in refreshed:
            update_reference(vp)
            if self.refiner is not None:
                self.refiner.submit(vp)
        self.previous_points = [vp for vp, _ in existing] + [vp for vp in new if vp.voxel_key]
        return sum(1 for vp in new if vp.voxel_key)


# -- run driver ----------------------------------------------------------------------------
@dataclass
class RunResult:
    out_dir: Path
    frames: int
    metrics: dict
    logs: list


def _tum_line(t: float, state: NavState) -> str:
    q = so3.to_quaternion(state.rotation)
    p = state.position
    return (f"{t:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
            f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}")


def write_ply(path, points: np.ndarray, gray: np.ndarray) -> None:
    """ASCII PLY with x y z r g b; unpainted points are written black."""
    g = np.nan_to_num(np.asarray(gray, dtype=float), nan=0.0)
    g = np.clip(np.rint(g), 0, 255).astype(int)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        for name in "xyz":
            f.write(f"property float {name}\n")
        for name in ("red", "green", "blue"):
            f.write(f"property uchar {name}\n")
        f.write("end_header\n")
        for (x, y, z), c in zip(points, g):
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {c} {c} {c}\n")


def read_ply_count(path) -> int:
    with open(path) as f:
        for line in f:
            if line.startswith("element vertex"):
                return int(line.split()[2])
    raise ValueError(f"{path}: no vertex element")


def write_timing(path, logs) -> dict:
    cols = ["frame", "t", *[f"{c}_ms" for c in TIMING_COLUMNS], "lidar_ms", "visual_ms", "total_ms"]
    totals = {c: 0.0 for c in cols[2:]}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in logs:
            vals = [r.timings.get(c, 0.0) for c in TIMING_COLUMNS]
            row = vals + [r.lidar_ms, r.visual_ms, r.lidar_ms + r.visual_ms]
            for c, v in zip(cols[2:], row):
                totals[c] += v
            w.writerow([r.index, f"{r.time:.9f}", *[f"{v:.6f}" for v in row]])
    return totals


FRAME_COLUMNS = ("frame", "t", "inv_exposure", "lidar_rows", "lidar_iters", "lidar_rms",
                 "visual_points", "visual_rows", "visual_rms", "rejected", "raycast",
                 "new_points", "scan_points")


def write_frames(path, logs) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FRAME_COLUMNS)
        for r in logs:
            w.writerow([r.index, f"{r.time:.9f}", f"{r.inv_exposure:.9f}", r.lidar_rows,
                        r.lidar_iters, f"{r.lidar_rms:.6g}", r.visual_points, r.visual_rows,
                        f"{r.visual_rms:.6g}", r.rejected, r.raycast, r.new_points,
                        r.scan_points])


def run_odometry(dataset_dir, cfg: RunConfig | None = None, out_dir=None, overlay: bool = False,
                 max_frames: int | None = None) -> RunResult:
    """Process a dataset directory and write trajectory, cloud, metrics and per-frame logs."""
    cfg = cfg or RunConfig()
    ds = Dataset(dataset_dir)
    out = Path(out_dir) if out_dir is not None else Path(dataset_dir) / "run"
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    if overlay:
        (out / "overlay").mkdir(exist_ok=True)
    n = len(ds) if max_frames is None else min(len(ds), int(max_frames))
    odo = Odometry(ds.calib, cfg, ds.imu)
    logs = []
    times, rots, poss = [], [], []
    t_start = time.perf_counter()
    try:
        with open(out / "trajectory.txt", "w") as traj:
            for i in range(n):
                bundle = ds.bundle(i)
                image = bundle.load_image()
                rec = odo.process(bundle, image)
                logs.append(rec)
                traj.write(_tum_line(bundle.time, odo.state) + "\n")
                traj.flush()
                times.append(bundle.time)
                rots.append(odo.state.rotation)
                poss.append(odo.state.position)
                if overlay and odo.last_submap is not None:
                    write_rgb(out / "overlay" / f"{i:06d}.png", draw_overlay(image, odo.last_submap))
                log.debug("frame %d: lidar %d rows, visual %d points, tau %.4f", i,
                          rec.lidar_rows, rec.visual_points, rec.inv_exposure)
    finally:
        odo.close()
    wall = time.perf_counter() - t_start
    totals = write_timing(out / "timing.csv", logs)
    write_frames(out / "frames.csv", logs)
    points, gray = odo.map.all_points()
    write_ply(out / "cloud.ply", points, gray)
    metrics = {
        "dataset": str(Path(dataset_dir).resolve()),
        "frames": n,
        "wall_time_s": wall,
        "fps": n / wall if wall > 0 else float("inf"),
        "processing_fps": n / (totals["total_ms"] / 1e3) if totals["total_ms"] > 0 else float("inf"),
        "timing_totals_ms": totals,
        "cloud_points": int(len(points)),
        "map": odo.map.summary(),
        "final_inv_exposure": float(odo.state.inv_exposure),
    }
    if ds.gt is not None and n:
        t_gt, R_gt, p_gt = ds.gt
        try:
            ate = evaluate_ate(times, poss, t_gt, p_gt)
            metrics["ate_rmse"] = ate.rmse
            metrics["end_drift"] = end_drift(times, rots, poss, t_gt, R_gt, p_gt)
            metrics["max_drift"] = max_drift(times, rots, poss, t_gt, R_gt, p_gt)
        except EvaluationError as exc:
            log.warning("ground truth comparison skipped: %s", exc)
    if ds.gt_exposure is not None and n:
        lookup = {int(k): e for k, _, e in ds.gt_exposure}
        if all(i in lookup for i in range(n)):
            metrics["exposure_rmse"] = exposure_rmse([r.inv_exposure for r in logs],
                                                     [lookup[i] for i in range(n)])
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return RunResult(out, n, metrics, logs)


def load_frames_csv(path) -> dict:
    """Columns of a frames.csv file as float arrays."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}

