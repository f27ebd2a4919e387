"""Diagnostic CSVs and plots written after a run."""
import shutil

import numpy as np
import pytest

from livo.config import RunConfig
from livo.diagnostics import emit_diagnostics, exposure_series, load_timing
from livo.pipeline import load_frames_csv, run_odometry
from livo.sim.scenarios import SimConfig, write_dataset


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("diag")
    write_dataset(root / "data", SimConfig(scenario="exposure", seed=2, duration=1.0))
    run_odometry(root / "data", RunConfig(), root / "run")
    return root


def rows(path):
    return len(path.read_text().splitlines()) - 1


def test_exposure_series_with_truth_has_both_columns(run_dir):
    written = emit_diagnostics(run_dir / "run")
    diag = run_dir / "run" / "diagnostics"
    assert {p.name for p in written} == {f"{n}.{e}" for n in ("exposure", "timing", "residuals")
                                         for e in ("csv", "png")}
    header = (diag / "exposure.csv").read_text().splitlines()[0].split(",")
    assert header == ["frame", "t", "estimate", "truth"]
    frames = load_frames_csv(run_dir / "run" / "frames.csv")
    assert rows(diag / "exposure.csv") == len(frames["frame"])
    data = np.genfromtxt(diag / "exposure.csv", delimiter=",", names=True)
    assert data["estimate"][0] == pytest.approx(1.0) and data["truth"][0] == pytest.approx(1.0)


def test_exposure_series_without_truth_is_estimate_only(run_dir, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(run_dir / "data", data)
    (data / "gt_exposure.csv").unlink()
    emit_diagnostics(run_dir / "run", data, tmp_path / "diag")
    header = (tmp_path / "diag" / "exposure.csv").read_text().splitlines()[0].split(",")
    assert header == ["frame", "t", "estimate"]
    assert (tmp_path / "diag" / "exposure.png").stat().st_size > 0


def test_timing_split_sums_to_totals(run_dir):
    emit_diagnostics(run_dir / "run")
    split = load_timing(run_dir / "run" / "diagnostics" / "timing.csv")
    stages_l = split["propagate_ms"] + split["undistort_ms"] + split["lidar_update_ms"] + \
        split["map_update_ms"]
    stages_v = split["visual_update_ms"] + split["generation_ms"]
    assert np.allclose(stages_l, split["lidar_ms"], atol=1e-4)
    assert np.allclose(stages_v, split["visual_ms"], atol=1e-4)
    assert np.allclose(split["lidar_ms"] + split["visual_ms"], split["total_ms"], atol=1e-4)


def test_missing_truth_frames_are_reported():
    frames = {"frame": np.arange(3.0), "t": np.arange(3.0), "inv_exposure": np.ones(3)}
    with pytest.raises(ValueError, match="no exposure truth"):
        exposure_series(frames, np.array([[0, 0.0, 1.0]]))
