"""Per-run diagnostic CSVs and plots: exposure, stage timing and residual RMS."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import read_table  # noqa: E402
from .evaluate import relative_inverse_exposure  # noqa: E402
from .pipeline import LIDAR_STAGES, VISUAL_STAGES, load_frames_csv  # noqa: E402


def load_timing(path) -> dict:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}


def exposure_series(frames: dict, gt_exposure: np.ndarray | None = None) -> dict:
    """Relative inverse exposure per frame, with the truth column when available.

    ``gt_exposure`` rows are (frame index, t, exposure factor).
    """
    idx = frames["frame"].astype(int)
    out = {"frame": idx, "t": frames["t"]}
    tau = frames["inv_exposure"]
    out["estimate"] = tau / tau[0]
    if gt_exposure is not None:
        lookup = {int(k): e for k, _, e in gt_exposure}
        missing = [k for k in idx if k not in lookup]
        if missing:
            raise ValueError(f"no exposure truth for frames {missing[:5]}")
        est, truth = relative_inverse_exposure(tau, [lookup[k] for k in idx])
        out["estimate"], out["truth"] = est, truth
    return out


def write_columns(path, columns: dict) -> None:
    names = list(columns)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for row in zip(*(columns[n] for n in names)):
            w.writerow([f"{v:.9g}" if isinstance(v, (float, np.floating)) else v for v in row])


def _exposure_plot(path, series: dict) -> None:
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(series["t"], series["estimate"], label="estimate")
    if "truth" in series:
        ax.plot(series["t"], series["truth"], "--", label="truth")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("inverse exposure (rel. frame 0)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _timing_plot(path, timing: dict) -> None:
    fig, ax = plt.subplots(figsize=(8, 3.5))
    frame = timing["frame"]
    ax.bar(frame, timing["lidar_ms"], width=1.0, label="LiDAR stages")
    ax.bar(frame, timing["visual_ms"], width=1.0, bottom=timing["lidar_ms"],
           label="visual stages")
    ax.set_xlabel("frame")
    ax.set_ylabel("time [ms]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _residual_plot(path, frames: dict) -> None:
    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    axes[0].plot(frames["frame"], frames["lidar_rms"])
    axes[0].set_ylabel("LiDAR RMS [m]")
    axes[1].plot(frames["frame"], frames["visual_rms"])
    axes[1].set_ylabel("photometric RMS")
    axes[1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_diagnostics(run_dir, dataset_dir=None, out_dir=None) -> list:
    """Write exposure, timing and residual CSVs and PNG plots for a finished run.

    The dataset directory (for exposure truth) defaults to the one recorded
    in the run's metrics. Returns the written paths.
    """
    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    frames = load_frames_csv(run / "frames.csv")
    timing = load_timing(run / "timing.csv")
    if dataset_dir is None and (run / "metrics.json").exists():
        dataset_dir = json.loads((run / "metrics.json").read_text()).get("dataset")
    gt = None
    if dataset_dir is not None and (Path(dataset_dir) / "gt_exposure.csv").exists():
        gt = read_table(Path(dataset_dir) / "gt_exposure.csv", 3)
    written = []

    series = exposure_series(frames, gt)
    write_columns(out / "exposure.csv", series)
    _exposure_plot(out / "exposure.png", series)
    written += [out / "exposure.csv", out / "exposure.png"]

    split = {"frame": timing["frame"].astype(int), "t": timing["t"]}
    for name in (*LIDAR_STAGES, *VISUAL_STAGES, "lidar", "visual", "total"):
        split[f"{name}_ms"] = timing[f"{name}_ms"]
    write_columns(out / "timing.csv", split)
    _timing_plot(out / "timing.png", split)
    written += [out / "timing.csv", out / "timing.png"]

    resid = {"frame": frames["frame"].astype(int), "t": frames["t"],
             "lidar_rms": frames["lidar_rms"], "visual_rms": frames["visual_rms"]}
    write_columns(out / "residuals.csv", resid)
    _residual_plot(out / "residuals.png", resid)
    written += [out / "residuals.csv", out / "residuals.png"]
    return written
