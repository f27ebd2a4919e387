"""Dataset directory writer/reader round trip and malformed-input diagnostics."""
import shutil

import numpy as np
import pytest

from livo.dataset import Dataset, DatasetError, read_calibration, read_tum
from livo.sim.scenarios import DEFAULT_CAMERA, DEFAULT_EXTRINSICS, SimConfig, write_dataset


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "static"
    summary = write_dataset(root, SimConfig(scenario="static", seed=3, duration=1.0,
                                            lidar_cols=16, lidar_rows=12))
    return root, summary


def copy(src, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(src, dst)
    return dst


def test_round_trip(small_dataset):
    root, summary = small_dataset
    ds = Dataset(root)
    assert len(ds) == summary["frames"] == 10
    assert ds.dropped_points == 0
    assert sum(len(ds.bundle(i).points) for i in range(len(ds))) == summary["lidar_points"]
    cal = ds.calib
    assert cal.camera == DEFAULT_CAMERA
    assert np.allclose(cal.extrinsics.lidar_to_imu, DEFAULT_EXTRINSICS.lidar_to_imu, atol=1e-11)
    assert np.allclose(cal.extrinsics.imu_to_camera, DEFAULT_EXTRINSICS.imu_to_camera, atol=1e-11)
    b = ds.bundle(4)
    assert np.all(b.point_times > ds.frame_times[3]) and np.all(b.point_times <= b.time)
    assert b.imu.t[0] <= ds.frame_times[3] and b.imu.t[-1] <= b.time
    img = b.load_image()
    assert img.shape == (DEFAULT_CAMERA.height, DEFAULT_CAMERA.width)
    t, R, p = ds.gt
    assert np.allclose(t, ds.frame_times)
    assert np.allclose(p, [4.8, 0.0, 0.0])
    assert ds.gt_exposure.shape == (10, 3)


def test_generation_is_bit_identical(small_dataset, tmp_path):
    root, _ = small_dataset
    again = tmp_path / "again"
    write_dataset(again, SimConfig(scenario="static", seed=3, duration=1.0,
                                   lidar_cols=16, lidar_rows=12))
    for rel in ("imu.csv", "lidar/000004.csv", "images/000004.pgm", "gt_traj.txt", "calib.txt"):
        assert (root / rel).read_bytes() == (again / rel).read_bytes()


def test_malformed_imu_line_is_reported(small_dataset, tmp_path):
    root = copy(small_dataset[0], tmp_path)
    lines = (root / "imu.csv").read_text().splitlines()
    lines[5] = "0.02,1,2,x,4,5,6"
    (root / "imu.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"imu\.csv:6: non-numeric"):
        Dataset(root)


def test_short_lidar_row_is_reported(small_dataset, tmp_path):
    root = copy(small_dataset[0], tmp_path)
    p = root / "lidar" / "000002.csv"
    lines = p.read_text().splitlines()
    lines[3] = "0.25,1.0,2.0"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"000002\.csv:4: expected 5 values, got 3"):
        Dataset(root)


def test_non_increasing_imu_time_is_reported(small_dataset, tmp_path):
    root = copy(small_dataset[0], tmp_path)
    lines = (root / "imu.csv").read_text().splitlines()
    lines[10] = lines[9]
    (root / "imu.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"imu\.csv:11: timestamps not increasing"):
        Dataset(root)


def test_calibration_errors(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text("camera = 320 240 240 240 159.5\n")
    with pytest.raises(DatasetError, match=r"calib\.txt:1: camera needs 6 values"):
        read_calibration(p)
    p.write_text("camera = 320 240 240 240 159.5 119.5\n")
    with pytest.raises(DatasetError, match="missing key 'lidar_to_imu'"):
        read_calibration(p)
    with pytest.raises(DatasetError, match="missing file"):
        read_calibration(tmp_path / "nope.txt")


def test_missing_image_names_path(small_dataset, tmp_path):
    root = copy(small_dataset[0], tmp_path)
    (root / "images" / "000006.pgm").unlink()
    ds = Dataset(root)
    with pytest.raises(DatasetError, match=r"images/000006\.pgm"):
        ds.bundle(6).load_image()


def test_missing_sweep_warns(small_dataset, tmp_path, caplog):
    root = copy(small_dataset[0], tmp_path)
    (root / "lidar" / "000003.csv").unlink()
    with caplog.at_level("WARNING"):
        ds = Dataset(root)
    assert "000003.csv" in caplog.text
    assert len(ds.bundle(3).points) == 0


def test_tum_reader(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0.1 1 2 3 0 0 0 1\n0.2 1 2 3 0 0 1 0\n")
    t, R, pos = read_tum(p)
    assert np.allclose(t, [0.1, 0.2]) and np.allclose(R[0], np.eye(3))
    assert np.allclose(R[1], np.diag([-1.0, -1.0, 1.0]))
