"""Trajectory and exposure metrics."""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from livo.evaluate import (EvaluationError, associate, end_drift, evaluate_ate, exposure_rmse,
                           relative_inverse_exposure)


def helix(n=1000):
    t = np.linspace(0.0, 50.0, n)
    p = np.stack([3 * np.cos(0.2 * t), 3 * np.sin(0.2 * t), 0.05 * t], axis=1)
    R = Rotation.from_euler("z", 0.2 * t).as_matrix()
    return t, R, p


def test_identical_trajectories_have_zero_error():
    t, R, p = helix()
    assert evaluate_ate(t, p, t, p).rmse == pytest.approx(0.0, abs=1e-12)
    assert end_drift(t, R, p, t, R, p) == pytest.approx(0.0, abs=1e-12)


def test_constant_offset_is_removed_by_alignment():
    t, _, p = helix()
    assert evaluate_ate(t, p + [1.0, 0.0, 0.0], t, p).rmse == pytest.approx(0.0, abs=1e-9)


def test_rigid_motion_is_removed_by_alignment():
    t, _, p = helix()
    R = Rotation.from_rotvec([0.1, -0.3, 0.7]).as_matrix()
    res = evaluate_ate(t, p @ R.T + [2.0, -1.0, 0.5], t, p)
    assert res.rmse == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(res.rotation, R.T, atol=1e-9)


def test_isotropic_noise_gives_sigma_sqrt3():
    t, _, p = helix()
    sigma = 0.05
    noisy = p + np.random.default_rng(3).normal(0.0, sigma, p.shape)
    assert evaluate_ate(t, noisy, t, p).rmse == pytest.approx(sigma * np.sqrt(3), rel=0.1)


def test_association_window_and_no_overlap():
    t, _, p = helix(100)
    i, j = associate(t + 0.002, t, 0.005)
    assert np.array_equal(i, j) and len(i) == 100
    with pytest.raises(EvaluationError, match="overlap"):
        evaluate_ate(t + 1000.0, p, t, p)


def test_static_estimate_aligns_translation_only():
    t = np.linspace(0, 10, 101)
    truth = np.tile([1.0, 2.0, 3.0], (101, 1))
    est = truth + 1e-5 * np.random.default_rng(0).standard_normal(truth.shape) + [0.3, 0, 0]
    res = evaluate_ate(t, est, t, truth)
    assert np.array_equal(res.rotation, np.eye(3))
    assert res.rmse < 1e-4


def test_exposure_error_is_relative_to_first_frame():
    e = np.array([1.0, 1.3, 0.7, 1.1])
    tau = 2.5 / e                      # arbitrary global scale
    est, truth = relative_inverse_exposure(tau, e)
    assert np.allclose(est, truth)
    assert exposure_rmse(tau, e) == pytest.approx(0.0, abs=1e-15)
    biased = tau * np.array([1.0, 1.1, 1.1, 1.1])
    assert exposure_rmse(biased, e) == pytest.approx(np.sqrt(3 * 0.01 / 4), rel=1e-12)
    with pytest.raises(EvaluationError):
        exposure_rmse(tau[:3], e)


def test_straight_line_path_is_aligned():
    t = np.linspace(0, 10, 101)
    truth = np.c_[0.1 * t, np.zeros_like(t), np.zeros_like(t)]
    R = Rotation.from_euler("z", np.pi).as_matrix()
    assert evaluate_ate(t, truth @ R.T + [4.8, 0, 0], t, truth).rmse == pytest.approx(0, abs=1e-9)
