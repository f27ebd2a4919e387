import numpy as np
import pytest

from livo import so3
from livo.imu import (ImuData, backward_compensate, forward_propagate, initial_state,
                      recombine_scans, step)
from livo.state import DIM, EXPO, NavState, NoiseConfig, boxminus, boxplus, check_covariance


def random_state(rng):
    return NavState(
        rotation=so3.exp(rng.normal(size=3)),
        position=rng.normal(size=3),
        velocity=rng.normal(size=3),
        gyro_bias=0.01 * rng.normal(size=3),
        accel_bias=0.1 * rng.normal(size=3),
        gravity=np.array([0.1, -0.2, -9.8]),
        inv_exposure=1.3,
    )


def test_boxplus_zero_is_identity():
    x = random_state(np.random.default_rng(0))
    assert boxplus(x, np.zeros(DIM)) is x


def test_boxplus_quarter_turn_about_z():
    d = np.zeros(DIM)
    d[2] = np.pi / 2
    R = boxplus(NavState(), d).rotation
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_retraction_round_trips():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        x = random_state(rng)
        d = rng.normal(size=DIM)
        d *= 0.099 * rng.uniform() / np.linalg.norm(d)
        np.testing.assert_allclose(boxminus(boxplus(x, d), x), d, atol=1e-9)
    for _ in range(200):
        a, b = random_state(rng), random_state(rng)
        b = boxplus(a, 0.05 * rng.normal(size=DIM))
        c = boxplus(b, boxminus(a, b))
        np.testing.assert_allclose(c.rotation, a.rotation, atol=1e-9)
        np.testing.assert_allclose(c.vector_part(), a.vector_part(), atol=1e-9)


def test_boxminus_rotation_block_inverts_exp():
    rng = np.random.default_rng(2)
    x = random_state(rng)
    for _ in range(100):
        v = rng.normal(size=3)
        v *= rng.uniform(0, 3.1) / np.linalg.norm(v)
        y = x.replace(rotation=x.rotation @ so3.exp(v))
        np.testing.assert_allclose(boxminus(y, x)[:3], v, atol=1e-8)
    assert not boxminus(x, x).any()


def test_inverse_exposure_is_clamped_positive():
    d = np.zeros(DIM)
    d[EXPO] = -5.0
    assert boxplus(NavState(), d).inv_exposure == pytest.approx(1e-4)


def test_boxplus_rejects_nonfinite():
    d = np.zeros(DIM)
    d[4] = np.nan
    with pytest.raises(ValueError):
        boxplus(NavState(), d)


def test_quaternion_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(100):
        R = so3.exp(rng.normal(size=3) * 2)
        q = so3.to_quaternion(R)
        assert q[3] >= 0
        np.testing.assert_allclose(so3.from_quaternion(q), R, atol=1e-12)


def imu_stream(t, omega, acc):
    n = len(t)
    return ImuData(t, np.tile(omega, (n, 1)), np.tile(acc, (n, 1)))


def test_stationary_hover_keeps_position_and_velocity():
    rng = np.random.default_rng(4)
    x = random_state(rng).replace(velocity=np.zeros(3))
    t = np.arange(201) * 0.005
    imu = imu_stream(t, x.gyro_bias, x.accel_bias - x.rotation.T @ x.gravity)
    y, _ = forward_propagate(x, np.eye(DIM) * 1e-3, imu, NoiseConfig())
    np.testing.assert_allclose(y.position, x.position, atol=1e-9)
    np.testing.assert_allclose(y.velocity, 0.0, atol=1e-9)
    np.testing.assert_allclose(y.rotation, x.rotation, atol=1e-12)


def fine_integrate(x, omega, acc, t0, t1, substeps):
    dt = (t1 - t0) / substeps
    for _ in range(substeps):
        x = step(x, omega, acc, dt)
    return x


def test_constant_acceleration_matches_fine_integrator():
    g = np.array([0.0, 0.0, -9.81])
    a = 0.7
    x0 = NavState(gravity=g)
    t = np.arange(401) * 0.005
    acc = np.array([a, 0.0, 0.0]) - g
    imu = imu_stream(t, np.zeros(3), acc)
    y, _ = forward_propagate(x0, np.zeros((DIM, DIM)), imu, NoiseConfig())
    ref = fine_integrate(x0, np.zeros(3), acc, 0.0, 2.0, 400 * 1000)
    assert y.position[0] == pytest.approx(0.5 * a * 4.0, rel=1e-9)
    np.testing.assert_allclose(y.position, ref.position, rtol=1e-6, atol=1e-9)


def propagate_mean(x, imu):
    y, _ = forward_propagate(x, np.zeros((DIM, DIM)), imu, NoiseConfig(0, 0, 0, 0, 0))
    return y


def test_covariance_matches_finite_difference_transition():
    rng = np.random.default_rng(5)
    x = random_state(rng)
    t = np.arange(21) * 0.005
    imu = ImuData(t, rng.normal(size=(21, 3)), rng.normal(size=(21, 3)) + [0, 0, 9.8])
    A = rng.normal(size=(DIM, DIM))
    P = A @ A.T * 1e-2
    zero = NoiseConfig(0, 0, 0, 0, 0)
    y, Py = forward_propagate(x, P, imu, zero)
    h = 1e-6
    F = np.zeros((DIM, DIM))
    for j in range(DIM):
        e = np.zeros(DIM)
        e[j] = h
        F[:, j] = (boxminus(propagate_mean(boxplus(x, e), imu), y)
                   - boxminus(propagate_mean(boxplus(x, -e), imu), y)) / (2 * h)
    ref = F @ P @ F.T
    assert np.linalg.norm(Py - ref) / np.linalg.norm(ref) < 1e-6
    check_covariance(Py)


def test_propagation_rejects_non_monotonic_stream():
    imu = ImuData([0.0, 0.01, 0.01], np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="index 2"):
        forward_propagate(NavState(), np.eye(DIM), imu, NoiseConfig())


def test_propagation_is_bit_deterministic():
    rng = np.random.default_rng(6)
    t = np.arange(50) * 0.005
    imu = ImuData(t, rng.normal(size=(50, 3)), rng.normal(size=(50, 3)))
    a = forward_propagate(NavState(), np.eye(DIM), imu, NoiseConfig())
    b = forward_propagate(NavState(), np.eye(DIM), imu, NoiseConfig())
    assert a[0].position.tobytes() == b[0].position.tobytes()
    assert a[1].tobytes() == b[1].tobytes()


def test_propagated_covariance_is_symmetric_psd():
    rng = np.random.default_rng(7)
    t = np.arange(100) * 0.005
    imu = ImuData(t, rng.normal(size=(100, 3)), rng.normal(size=(100, 3)))
    _, P = forward_propagate(NavState(), np.eye(DIM) * 1e-4, imu, NoiseConfig())
    check_covariance(P)


def test_backward_compensation_static_is_identity():
    rng = np.random.default_rng(8)
    g = np.array([0, 0, -9.81])
    t = np.arange(21) * 0.005
    imu = imu_stream(t, np.zeros(3), -g)
    pts = rng.normal(size=(50, 3)) * 5
    times = np.sort(rng.uniform(0, 0.1, 50))
    out, keep = backward_compensate(pts, times, NavState(gravity=g), imu, 0.1)
    assert keep.all()
    np.testing.assert_array_equal(out, pts)


def test_backward_compensation_constant_velocity():
    rng = np.random.default_rng(9)
    g = np.array([0, 0, -9.81])
    v = np.array([1.5, -0.3, 0.2])
    t = np.arange(21) * 0.005
    imu = imu_stream(t, np.zeros(3), -g)
    end = NavState(position=np.array([3.0, 1.0, 0.5]), velocity=v, gravity=g)
    pts = rng.normal(size=(40, 3)) * 5
    times = np.sort(rng.uniform(0, 0.1, 40))
    times[-1] = 0.1
    out, _ = backward_compensate(pts, times, end, imu, 0.1)
    expect = pts - np.outer(0.1 - times, v)
    np.testing.assert_allclose(out, expect, atol=1e-6)
    np.testing.assert_array_equal(out[-1], pts[-1])


def test_backward_compensation_drops_points_outside_span():
    t = np.arange(11) * 0.01
    imu = imu_stream(t, np.zeros(3), [0, 0, 9.81])
    _, keep = backward_compensate(np.ones((3, 3)), np.array([-0.5, 0.05, 0.1]),
                                  NavState(), imu, 0.1)
    assert keep.tolist() == [False, True, True]


def test_recombine_basic_partition():
    times = np.round(np.arange(1, 20) * 0.01, 10)
    scans, dropped = recombine_scans(times, [0.1, 0.2])
    assert dropped == 0
    assert np.allclose(times[scans[0]], np.arange(1, 11) * 0.01)
    assert np.allclose(times[scans[1]], np.arange(11, 20) * 0.01)


def test_recombine_right_closed_and_empty():
    scans, _ = recombine_scans(np.array([0.1]), [0.1, 0.2])
    assert scans[0].tolist() == [0] and len(scans[1]) == 0
    scans, dropped = recombine_scans(np.zeros(0), [0.1, 0.2])
    assert dropped == 0 and all(len(s) == 0 for s in scans)


def test_recombine_counts_dropped_points():
    times = np.array([-0.5, 0.05, 0.15, 0.25])
    scans, dropped = recombine_scans(times, [0.1, 0.2])
    assert dropped == 2
    assert sum(len(s) for s in scans) + dropped == len(times)


def test_initial_state_gravity_from_stationary_average():
    t = np.arange(200) * 0.005
    imu = imu_stream(t, np.zeros(3), [0.1, 0.0, 9.8])
    x = initial_state(imu)
    np.testing.assert_allclose(x.gravity, [-0.1, 0.0, -9.8])
    assert x.inv_exposure == 1.0
