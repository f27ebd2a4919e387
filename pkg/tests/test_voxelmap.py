import numpy as np
import pytest

from livo.voxelmap import VoxelMap, VoxelMapConfig, fit_plane, fit_planes, lattice


def plane_points(rng, normal, center, n, extent=0.2, sigma=0.0):
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    u = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 0.1:
        u = np.cross(normal, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    ab = rng.uniform(-extent, extent, size=(n, 2))
    pts = center + ab[:, :1] * u + ab[:, 1:] * v
    return pts + sigma * rng.normal(size=(n, 1)) * normal


def test_insert_scan_keys():
    m = VoxelMap()
    assert m.insert_scan([[0.1, 0.1, 0.1]]) == [(0, 0, 0)]
    keys = m.insert_scan([[0.1, 0.0, 0.0], [0.7, 0.0, 0.0]])
    assert len(set(keys)) == 2


def test_insert_scan_counts_are_conserved():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-5, 5, size=(10_000, 3))
    m = VoxelMap()
    m.insert_scan(pts)
    assert sum(sum(len(c[0]) for c in chunks) for chunks in m._pending.values()) == 10_000


def test_points_outside_window_are_dropped():
    m = VoxelMap()
    m.insert_scan([[0.0, 0.0, 0.0], [80.0, 0.0, 0.0]])
    assert m.dropped_outside == 1


def test_exact_plane_normal():
    rng = np.random.default_rng(1)
    n = np.array([0.3, -0.5, 0.8])
    n /= np.linalg.norm(n)
    p = fit_plane(plane_points(rng, n, [1.0, 2.0, 3.0], 8))
    assert abs(abs(p.normal @ n) - 1.0) < 1e-9


def test_collinear_points_rejected():
    pts = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]], float) * 0.1
    assert fit_plane(pts) is None


def test_noisy_plane_matches_dense_eigensolver():
    rng = np.random.default_rng(2)
    n = np.array([0.1, 0.2, 1.0])
    n /= np.linalg.norm(n)
    pts = plane_points(rng, n, np.zeros(3), 50, extent=0.25, sigma=0.01)
    p = fit_plane(pts)
    assert np.degrees(np.arccos(abs(p.normal @ n))) < 2.0
    D = pts - pts.mean(axis=0)
    w, V = np.linalg.eig(D.T @ D / len(pts))
    ref = np.real(V[:, np.argmin(np.real(w))])
    assert abs(abs(ref @ p.normal) - 1.0) < 1e-10


def test_parameter_covariance_against_monte_carlo():
    rng = np.random.default_rng(3)
    n = np.array([0.0, 0.0, 1.0])
    base = plane_points(rng, n, np.zeros(3), 60, extent=0.25)
    sigma = 1e-3
    covs = np.tile(np.eye(3) * sigma**2, (60, 1, 1))
    ref = fit_plane(base, covs, toward=[0, 0, 5])
    samples = []
    for _ in range(4000):
        p = fit_plane(base + sigma * rng.normal(size=base.shape))
        nn = p.normal if p.normal @ ref.normal > 0 else -p.normal
        samples.append(np.concatenate([nn, p.center]))
    emp = np.cov(np.array(samples).T)
    np.testing.assert_allclose(np.diag(ref.param_cov), np.diag(emp),
                               rtol=0.15, atol=1e-9)
    assert np.linalg.eigvalsh(ref.param_cov).min() > -1e-15


def test_normal_faces_sensor_on_first_fit():
    rng = np.random.default_rng(4)
    pts = plane_points(rng, [0, 0, 1], [0.2, 0.2, 0.2], 30)
    assert fit_plane(pts, toward=[0, 0, -3]).normal[2] < 0
    assert fit_plane(pts, toward=[0, 0, 3]).normal[2] > 0


def test_single_plane_voxel_stays_root_level():
    rng = np.random.default_rng(5)
    m = VoxelMap()
    m.insert_scan(plane_points(rng, [0, 0, 1], [0.25, 0.25, 0.25], 40, extent=0.2))
    m.update_geometry(sensor_position=np.array([0.0, 0.0, 3.0]))
    leaf, plane = m.query_voxel(np.array([0.25, 0.25, 0.25]))
    assert leaf.depth == 0 and plane.normal[2] > 0.999


def test_corner_voxel_subdivides():
    rng = np.random.default_rng(6)
    ab = rng.uniform(0.0, 0.5, size=(400, 2))
    floor = np.c_[ab[:, 0], ab[:, 1], np.full(400, 0.01)]
    wall = np.c_[np.full(400, 0.01), ab[:, 0], ab[:, 1]]
    m = VoxelMap()
    m.insert_scan(np.vstack([floor, wall]))
    m.update_geometry(sensor_position=np.array([2.0, 2.0, 2.0]))
    root = m.voxels[(0, 0, 0)]
    assert root.children is not None
    checked = 0
    for leaf in root.leaves():
        if leaf.plane is None:
            continue
        n = leaf.plane.normal
        ang = min(np.degrees(np.arccos(min(1.0, abs(n @ axis)))) for axis in ([0, 0, 1], [1, 0, 0]))
        assert ang < 2.0
        assert leaf.depth <= 3
        checked += 1
    assert checked >= 4


def test_mature_plane_is_frozen():
    rng = np.random.default_rng(7)
    m = VoxelMap()
    sensor = np.array([0.0, 0.0, 3.0])
    for _ in range(4):
        m.insert_scan(plane_points(rng, [0, 0, 1], [0.25, 0.25, 0.25], 30, extent=0.2))
        m.update_geometry(sensor_position=sensor)
    leaf, plane = m.query_voxel(np.array([0.25, 0.25, 0.25]))
    assert plane.mature and len(leaf.points) <= 50
    sig = plane.signature()
    for _ in range(3):
        m.insert_scan(plane_points(rng, [0, 0, 1], [0.25, 0.25, 0.25], 30, extent=0.2))
        m.update_geometry(sensor_position=sensor)
    assert m.query_voxel(np.array([0.25, 0.25, 0.25]))[1].signature() == sig
    assert len(leaf.points) == 50


def test_slide_window():
    m = VoxelMap(VoxelMapConfig(detection_radius=10.0))
    m.insert_scan([[1.0, 1.0, 1.0]])
    assert not m.slide_window(np.zeros(3))
    assert m.slide_window(np.array([41.0, 0.0, 0.0]))
    assert m.window.center[0] == 20.0
    m2 = VoxelMap(VoxelMapConfig(detection_radius=10.0))
    rng = np.random.default_rng(8)
    pts = plane_points(rng, [0, 0, 1], [-45.0, 0.2, 0.2], 30)
    m2.insert_scan(pts)
    m2.update_geometry(sensor_position=np.array([-45.0, 0.0, 3.0]))
    assert m2.query_voxel(pts[0]) is not None
    m2.slide_window(np.array([41.0, 0.0, 0.0]))
    assert m2.query_voxel(pts[0]) is None
    assert (m2.query_planes(pts) < 0).all()


def test_random_walk_keeps_voxels_inside_window():
    rng = np.random.default_rng(9)
    m = VoxelMap(VoxelMapConfig(detection_radius=10.0))
    pos = np.zeros(3)
    for _ in range(1000):
        pos = pos + rng.normal(size=3) * 2.0
        m.slide_window(pos)
        m.insert_scan(pos + rng.uniform(-10, 10, size=(5, 3)))
        half = m.window.length / 2
        assert np.all(np.abs(pos - m.window.center) + m.window.radius <= half)
        centers = (np.array(list(m.voxels), float) + 0.5) * m.cfg.root_size
        assert np.all(np.abs(centers - m.window.center) <= half)


def brute_force_query(m, p):
    best = None
    for leaf in m.leaves():
        if leaf.plane is None:
            continue
        size = m.cfg.root_size / (1 << leaf.depth)
        if np.array_equal(lattice(p, size), leaf.key):
            if best is None or leaf.depth > best.depth:
                best = leaf
    return best


def test_query_matches_linear_scan():
    rng = np.random.default_rng(10)
    m = VoxelMap()
    sensor = np.array([0.0, 0.0, 5.0])
    for n, c in [([0, 0, 1], [0, 0, 0]), ([1, 0, 0], [0.9, 0.0, 0.5]),
                 ([1, 1, 0], [-1.0, -1.0, 0.7])]:
        m.insert_scan(plane_points(rng, n, np.array(c, float), 3000, extent=1.5, sigma=0.002))
    m.update_geometry(sensor_position=sensor)
    probes = rng.uniform(-2, 2, size=(1000, 3))
    probes[:500, 2] = rng.uniform(-0.02, 0.02, 500)
    slots = m.query_planes(probes)
    index = m.plane_index()
    hits = 0
    for p, s in zip(probes, slots):
        ref = brute_force_query(m, p)
        got = m.query_voxel(p)
        if ref is None:
            assert got is None and s < 0
        else:
            hits += 1
            assert got[0] is ref and index.leaves[s] is ref
    assert hits > 100


def test_summary_and_export():
    rng = np.random.default_rng(11)
    m = VoxelMap()
    m.insert_scan(plane_points(rng, [0, 0, 1], [0.25, 0.25, 0.25], 40))
    m.update_geometry(sensor_position=np.array([0, 0, 3.0]))
    s = m.summary()
    assert s["planes"] == 1 and s["points"] == 40
    pts, cols = m.all_points()
    assert pts.shape == (40, 3) and np.isnan(cols).all()


def test_batched_fit_matches_single_fit():
    rng = np.random.default_rng(5)
    sets, covs, toward = [], [], []
    for k in range(40):
        n = rng.normal(size=3)
        m = int(rng.integers(3, 60))
        pts = plane_points(rng, n, rng.normal(size=3), m, sigma=float(rng.choice([0.0, 0.01, 0.2])))
        A = rng.normal(size=(m, 3, 3)) * 1e-2
        sets.append(pts)
        covs.append(A @ np.transpose(A, (0, 2, 1)))
        toward.append(rng.normal(size=3) * 5 if k % 2 else None)
    planes, _ = fit_planes(sets, covs, toward=toward)
    for pts, c, t, got in zip(sets, covs, toward, planes):
        ref = fit_plane(pts, c, toward=t)
        assert (ref is None) == (got is None)
        if ref is None:
            continue
        s = np.sign(ref.normal @ got.normal)
        assert np.allclose(got.normal, s * ref.normal, atol=1e-9)
        assert np.allclose(got.center, ref.center, atol=1e-12)
        if s > 0:
            assert np.allclose(got.param_cov, ref.param_cov, atol=1e-9)
