"""Dataset directory reader shared by simulated and recorded data.

Layout::

    imu.csv              t,wx,wy,wz,ax,ay,az   (header line, then one sample per line)
    lidar/<k>.csv        t,x,y,z,intensity     (LiDAR frame, per-point timestamps)
    images/<k>.pgm       8-bit grayscale
    images/times.csv     k,t                   (camera trigger times)
    calib.txt            key = values          (camera, lidar_to_imu, imu_to_camera)
    gt_traj.txt          optional, t x y z qx qy qz qw
    gt_exposure.csv      optional, k,t,exposure
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import so3
from .image import PinholeCamera, read_gray
from .imu import ImuData, recombine_scans
from .state import Extrinsics

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Malformed or missing dataset content; the message names the file and line."""


def read_table(path: Path, ncols: int, header: bool = True, sep: str | None = ",") -> np.ndarray:
    """Numeric table with a fixed column count, reporting the first bad line."""
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        data = np.loadtxt(path, delimiter=sep, skiprows=1 if header else 0, ndmin=2, comments="#")
        if data.size == 0:
            return data.reshape(0, ncols)
        if data.shape[1] == ncols and np.all(np.isfinite(data)):
            return data
    except ValueError:
        pass
    # slow path: locate the offending line
    lines = path.read_text().splitlines()
    start = 1 if header else 0
    rows = []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(sep) if sep else line.split()
        if len(parts) != ncols:
            raise DatasetError(f"{path}:{lineno}: expected {ncols} values, got {len(parts)}")
        try:
            row = [float(v) for v in parts]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
        if not np.all(np.isfinite(row)):
            raise DatasetError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
    return np.array(rows, dtype=float).reshape(-1, ncols)


def _check_increasing(path: Path, t: np.ndarray, strict: bool = True, header: bool = True):
    d = np.diff(t)
    bad = np.nonzero(d <= 0 if strict else d < 0)[0]
    if len(bad):
        raise DatasetError(f"{path}:{int(bad[0]) + 2 + int(header)}: timestamps not increasing")


@dataclass
class Calibration:
    camera: PinholeCamera
    extrinsics: Extrinsics


def read_calibration(path: Path) -> Calibration:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected 'key = values'")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = (lineno, [float(v) for v in val.split()])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric value for {key}") from None
    need = {"camera": 6, "lidar_to_imu": 16, "imu_to_camera": 16}
    for key, n in need.items():
        if key not in values:
            raise DatasetError(f"{path}: missing key {key!r}")
        lineno, v = values[key]
        if len(v) != n:
            raise DatasetError(f"{path}:{lineno}: {key} needs {n} values, got {len(v)}")
    w, h, fx, fy, cx, cy = values["camera"][1]
    try:
        cam = PinholeCamera(fx, fy, cx, cy, int(w), int(h))
        ext = Extrinsics(np.array(values["lidar_to_imu"][1]).reshape(4, 4),
                         np.array(values["imu_to_camera"][1]).reshape(4, 4))
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return Calibration(cam, ext)


def read_tum(path: Path):
    """(times, rotations (N,3,3), positions (N,3)) from a TUM trajectory file."""
    data = read_table(path, 8, header=False, sep=None)
    _check_increasing(path, data[:, 0], header=False)
    R = np.array([so3.from_quaternion(q) for q in data[:, 4:8]]).reshape(-1, 3, 3)
    return data[:, 0], R, data[:, 1:4]


@dataclass
class FrameBundle:
    """One synchronized unit: scan points in (t_{k-1}, t_k], the image at t_k and the IMU span."""

    index: int
    time: float
    point_times: np.ndarray
    points: np.ndarray
    intensity: np.ndarray
    image_path: Path
    imu: ImuData

    def load_image(self) -> np.ndarray:
        if not self.image_path.exists():
            raise DatasetError(f"missing image file: {self.image_path}")
        return read_gray(self.image_path).astype(float)


class Dataset:
    """Loads the IMU stream, calibration and LiDAR sweeps; images are read on demand."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset directory not found: {self.root}")
        self.calib = read_calibration(self.root / "calib.txt")
        imu_path = self.root / "imu.csv"
        raw = read_table(imu_path, 7)
        if len(raw) == 0:
            raise DatasetError(f"{imu_path}: no IMU samples")
        _check_increasing(imu_path, raw[:, 0])
        self.imu = ImuData(raw[:, 0], raw[:, 1:4], raw[:, 4:7])
        times_path = self.root / "images" / "times.csv"
        cam = read_table(times_path, 2)
        if len(cam) == 0:
            raise DatasetError(f"{times_path}: no camera frames")
        _check_increasing(times_path, cam[:, 1])
        self.frame_ids = cam[:, 0].astype(int)
        self.frame_times = cam[:, 1]
        chunks = []
        for k in self.frame_ids:
            p = self.root / "lidar" / f"{k:06d}.csv"
            if p.exists():
                chunks.append(read_table(p, 5))
            else:
                log.warning("missing LiDAR sweep %s; frame will coast on IMU", p)
        lidar = np.vstack(chunks) if chunks else np.zeros((0, 5))
        order = np.argsort(lidar[:, 0], kind="stable")
        self.lidar = lidar[order]
        self.scans, self.dropped_points = recombine_scans(self.lidar[:, 0], self.frame_times)
        self.gt = None
        if (self.root / "gt_traj.txt").exists():
            self.gt = read_tum(self.root / "gt_traj.txt")
        self.gt_exposure = None
        if (self.root / "gt_exposure.csv").exists():
            self.gt_exposure = read_table(self.root / "gt_exposure.csv", 3)

    def __len__(self) -> int:
        return len(self.frame_times)

    def bundle(self, i: int) -> FrameBundle:
        t = float(self.frame_times[i])
        t_prev = float(self.frame_times[i - 1]) if i > 0 else float(self.imu.t[0])
        idx = self.scans[i]
        rows = self.lidar[idx]
        return FrameBundle(int(i), t, rows[:, 0], rows[:, 1:4], rows[:, 4],
                           self.root / "images" / f"{int(self.frame_ids[i]):06d}.pgm",
                           self.imu.window(t_prev, t))

    def __iter__(self):
        for i in range(len(self)):
            yield self.bundle(i)
