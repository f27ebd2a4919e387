import numpy as np
import pytest

from livo.image import ImagePyramid
from livo.patches import (Candidates, GenerationConfig, NormalObjective, Patch, VisualMapPoint,
                          cell_index, generate_visual_points, ncc, normal_basis,
                          normal_from_parameter, parameterize_normal, patch_offsets,
                          refine_normal, score_patch, update_reference)
from scenes import (CAM, AnalyticPatch, angle_deg, look_at, perturb_normal, plane_views,
                    point_with_patches)


def linear_image(h=120, w=160):
    y, x = np.mgrid[0:h, 0:w]
    return 20.0 + 0.7 * x + 0.4 * y


def test_patch_offsets_cover_minus4_to_3():
    o = patch_offsets(8)
    assert o.shape == (64, 2)
    assert o.min() == -4 and o.max() == 3


def test_patch_levels_sampled_at_stride():
    img = linear_image()
    pyr = ImagePyramid(img)
    center = np.array([70.3, 55.6])
    p = Patch(pyr, center, np.eye(3), np.zeros(3), 1.0, 0)
    assert len(p.pyramid) == 3
    offs = patch_offsets(8)
    for lvl in range(3):
        # the box-filtered pyramid of a linear ramp is the same ramp, so every level
        # must equal the level-0 ramp at the stride-2^l grid around the center
        q = center + offs * (1 << lvl)
        expect = 20.0 + 0.7 * q[:, 0] + 0.4 * q[:, 1]
        np.testing.assert_allclose(p.pyramid[lvl].ravel(), expect, atol=1e-9)


def brute_ncc(f, g):
    f, g = f.ravel(), g.ravel()
    mf, mg = sum(f) / len(f), sum(g) / len(g)
    num = sum((a - mf) * (b - mg) for a, b in zip(f, g))
    da = sum((a - mf) ** 2 for a in f)
    db = sum((b - mg) ** 2 for b in g)
    return num / (da * db) ** 0.5


def test_ncc_matches_double_loop_and_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        f, g = rng.uniform(0, 255, (8, 8)), rng.uniform(0, 255, (8, 8))
        v = ncc(f, g)
        assert abs(v - brute_ncc(f, g)) < 1e-12
        assert -1.0 <= v <= 1.0


def test_ncc_gain_offset_invariant_and_flat():
    rng = np.random.default_rng(1)
    f = rng.uniform(0, 255, (8, 8))
    assert ncc(f, 2.5 * f + 7.0) == pytest.approx(1.0, abs=1e-12)
    assert ncc(f, np.full((8, 8), 3.0)) == 0.0


def frontal_patch(data, camera_center, frame_id=0):
    p = Patch.__new__(Patch)
    p.pyramid = [data]
    p.R_cw = np.eye(3)
    p.t_cw = -np.asarray(camera_center, float)
    p.frame_id = frame_id
    return p


def test_score_identical_frontal_is_one():
    rng = np.random.default_rng(2)
    data = rng.uniform(0, 255, (8, 8))
    normal = np.array([0.0, 0.0, -1.0])
    point = np.array([0.0, 0.0, 3.0])
    f = frontal_patch(data, [0, 0, 0])
    others = [frontal_patch(data, [0, 0, 0]) for _ in range(3)]
    assert score_patch(f, others, normal, point, np.zeros((3, 3))) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        score_patch(f, [], normal, point)


def test_score_matches_formula():
    rng = np.random.default_rng(3)
    f = frontal_patch(rng.uniform(0, 255, (8, 8)), [0.3, 0.1, 0])
    others = [frontal_patch(rng.uniform(0, 255, (8, 8)), [0, 0, 0]) for _ in range(4)]
    normal = np.array([0.0, 0.6, -0.8])
    point = np.array([0.2, -0.1, 3.0])
    cov = np.diag([0.1, 0.2, 0.3])
    w = 1.0 / (1.0 + np.exp(0.6))
    ray = point - f.camera_center
    c = abs(normal @ ray) / np.linalg.norm(ray)
    expect = (1 - w) * np.mean([brute_ncc(f.pyramid[0], g.pyramid[0]) for g in others]) + w * c
    assert score_patch(f, others, normal, point, cov) == pytest.approx(expect, abs=1e-12)


def test_update_reference_single_tie_and_frontal():
    rng = np.random.default_rng(4)
    data = rng.uniform(0, 255, (8, 8))
    point = np.array([0.0, 0.0, 3.0])
    vp = VisualMapPoint(position=point, normal=np.array([0.0, 0.0, -1.0]))
    vp.patches = [frontal_patch(data, [0.0, 0.0, 0.0], 0)]
    assert update_reference(vp) == 0
    # symmetric oblique views give equal scores: latest capture wins
    vp.patches = [frontal_patch(data, [1.0, 0.0, 0.0], 0), frontal_patch(data, [-1.0, 0.0, 0.0], 1)]
    assert update_reference(vp) == 1
    # the frontal view dominates through the cosine term
    vp.patches = [frontal_patch(data, [1.0, 0.0, 0.0], 0), frontal_patch(data, [0.0, 0.0, 0.0], 1),
                  frontal_patch(data, [-1.0, 0.0, 0.0], 2)]
    assert update_reference(vp) == 1


def test_update_reference_scores_match_single_scoring():
    rng = np.random.default_rng(8)
    vp = VisualMapPoint(position=np.array([0.2, -0.1, 3.0]), normal=np.array([0.0, 0.6, -0.8]),
                        normal_cov=np.diag([0.05, 0.1, 0.2]))
    vp.patches = [frontal_patch(rng.uniform(0, 255, (8, 8)), rng.normal(size=3) * 0.5, i)
                  for i in range(6)]
    vp.patches.append(frontal_patch(np.full((8, 8), 9.0), [0.0, 0.0, 0.0], 6))
    update_reference(vp)
    for i, f in enumerate(vp.patches):
        others = vp.patches[:i] + vp.patches[i + 1:]
        assert vp.scores[i] == pytest.approx(
            score_patch(f, others, vp.normal, vp.position, vp.normal_cov), abs=1e-12)
    assert vp.reference == int(np.argmax(vp.scores))


def test_parameterization_constraint_and_round_trip():
    rng = np.random.default_rng(5)
    n_checked = 0
    while n_checked < 100:
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        p = rng.normal(size=3) * 2
        p[2] = abs(p[2]) + 0.5
        if n @ p <= 0.1:
            continue
        B, b = normal_basis(p)
        m_any = rng.normal(size=2)
        assert p @ (B @ m_any + b) == pytest.approx(1.0, abs=1e-12)
        m = parameterize_normal(n, p)
        back = normal_from_parameter(m, p, hint=n)
        np.testing.assert_allclose(back, n, atol=1e-12)
        n_checked += 1


def test_parameterization_along_optical_axis():
    p = np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(parameterize_normal(np.array([0.0, 0.0, 1.0]), p), [0.0, 0.0])
    B, b = normal_basis(p)
    np.testing.assert_allclose(B @ np.zeros(2) + b, [0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        parameterize_normal(np.array([1.0, 0.0, 0.0]), p)


def analytic_refine_point(rng):
    """Point with analytic patches related by the plane homography (smooth images)."""
    R0, t0 = np.eye(3), np.zeros(3)
    n = np.array([0.2, -0.1, -1.0])
    n /= np.linalg.norm(n)
    X = np.array([0.05, -0.03, 2.0])
    vp = VisualMapPoint(position=X, normal=n)
    vp.patches.append(AnalyticPatch(CAM.project(X), R0, t0))
    for k in range(3):
        R, t = look_at(rng.normal(size=3) * 0.3, X)
        M = n / (n @ X)
        H_cr = CAM.K @ (R + np.outer(t, M)) @ CAM.K_inv
        vp.patches.append(AnalyticPatch(CAM.project(R @ X + t), R, t, 1.0, H=np.linalg.inv(H_cr)))
    return vp


def test_refinement_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(10):
        vp = analytic_refine_point(rng)
        obj = NormalObjective(vp, CAM)
        m0 = parameterize_normal(vp.normal_in_reference(), obj.p_ref) + rng.normal(size=2) * 0.05
        r, J = obj.residuals(m0, with_jacobian=True)
        g = 2 * J.T @ r
        h = 1e-6
        fd = np.array([(obj.cost(m0 + h * e) - obj.cost(m0 - h * e)) / (2 * h) for e in np.eye(2)])
        assert np.linalg.norm(g - fd) <= 1e-3 * np.linalg.norm(fd)


@pytest.fixture(scope="module")
def plane_point():
    offsets = [(0.0, 0.0, 0.0), (0.7, 0.0, 0.0), (-0.7, 0.1, 0.0), (0.0, 0.6, 0.1), (0.1, -0.6, 0.0)]
    world, n, views = plane_views(offsets)
    X = np.array([0.0, 0.0, 2.0])
    return n, views, X


def test_refine_recovers_perturbed_normal(plane_point):
    n, views, X = plane_point
    vp = point_with_patches(X, perturb_normal(n, 8.0), views)
    res = refine_normal(vp, CAM)
    assert res.converged and res.iterations <= 20
    assert angle_deg(res.normal, n) < 1.0
    assert vp.normal_converged and len(vp.patches) == 1


def test_refine_from_true_normal_is_stationary(plane_point):
    # exact homography-related images: the true normal is the exact optimum
    vp = analytic_refine_point(np.random.default_rng(8))
    n = vp.normal.copy()
    res = refine_normal(vp, CAM)
    assert res.converged and res.iterations <= 2
    assert angle_deg(res.normal, n) < 0.1
    # rendered images: the optimum moves only by the interpolation error
    n, views, X = plane_point
    res = refine_normal(point_with_patches(X, n, views), CAM)
    assert res.converged and angle_deg(res.normal, n) < 0.1


def test_refine_requires_two_patches():
    vp = VisualMapPoint(position=np.array([0.0, 0.0, 2.0]), normal=np.array([0.0, 0.0, -1.0]))
    with pytest.raises(ValueError):
        refine_normal(vp, CAM)


def textured_pyramid(seed=0):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:240, 0:320]
    img = 128 + 60 * np.sin(x / 7.0) * np.cos(y / 9.0) + rng.normal(0, 5, (240, 320))
    return ImagePyramid(img)


def candidates_at(pixels, depth=3.0):
    pts = np.array([[(u - CAM.cx) / CAM.fx * depth, (v - CAM.cy) / CAM.fy * depth, depth]
                    for u, v in pixels])
    n = len(pts)
    return Candidates(pts, np.tile([0.0, 0.0, -1.0], (n, 1)), np.zeros((n, 3, 3)),
                      [(0, 0, 6)] * n)


def test_generation_empty_and_single():
    pyr = textured_pyramid()
    cfg = GenerationConfig(min_gradient=0.0)
    new, ref = generate_visual_points(pyr, CAM, np.eye(3), np.zeros(3), 1.0, 0,
                                      Candidates.empty(), [], cfg)
    assert new == [] and ref == []
    new, _ = generate_visual_points(pyr, CAM, np.eye(3), np.zeros(3), 1.0, 0,
                                    candidates_at([(100.0, 100.0)]), [], cfg)
    assert len(new) == 1 and len(new[0].patches) == 1 and len(new[0].patches[0].pyramid) == 3


def test_generation_picks_highest_gradient_per_cell():
    pyr = textured_pyramid(1)
    img = pyr.levels[0]
    pix = [(92.0, 95.0), (100.0, 101.0), (150.0, 160.0)]

    def sobel_like(u, v):
        u, v = int(u), int(v)
        return np.hypot(0.5 * (img[v, u + 1] - img[v, u - 1]), 0.5 * (img[v + 1, u] - img[v - 1, u]))

    new, _ = generate_visual_points(pyr, CAM, np.eye(3), np.zeros(3), 1.0, 0,
                                    candidates_at(pix), [], GenerationConfig(min_gradient=0.0))
    cells = cell_index(np.array(pix), CAM, 30)
    assert cells[0] == cells[1] != cells[2]
    winner = 0 if sobel_like(*pix[0]) > sobel_like(*pix[1]) else 1
    got = [CAM.project(vp.position) for vp in new]
    assert len(new) == 2
    assert any(np.allclose(g, pix[winner]) for g in got)
    used = cell_index(np.array(got), CAM, 30)
    assert len(set(used.tolist())) == len(used)


def test_generation_skips_flat_image():
    pyr = ImagePyramid(np.full((240, 320), 90.0))
    new, _ = generate_visual_points(pyr, CAM, np.eye(3), np.zeros(3), 1.0, 0,
                                    candidates_at([(100.0, 100.0)]), [], GenerationConfig())
    assert new == []


def test_generation_reattaches_after_frames_or_drift():
    pyr = textured_pyramid()
    cfg = GenerationConfig(min_gradient=0.0)
    new, _ = generate_visual_points(pyr, CAM, np.eye(3), np.zeros(3), 1.0, 0,
                                    candidates_at([(100.0, 100.0)]), [], cfg)
    vp = new[0]
    _, ref = generate_visual_points(pyr, CAM, np.eye(3), np.zeros(3), 1.0, 5, Candidates.empty(),
                                    [(vp, np.array([101.0, 100.0]))], cfg)
    assert ref == [] and len(vp.patches) == 1
    _, ref = generate_visual_points(pyr, CAM, np.eye(3), np.zeros(3), 1.0, 20, Candidates.empty(),
                                    [(vp, np.array([101.0, 100.0]))], cfg)
    assert ref == [vp] and len(vp.patches) == 2
    _, ref = generate_visual_points(pyr, CAM, np.eye(3), np.zeros(3), 1.0, 21, Candidates.empty(),
                                    [(vp, np.array([150.0, 100.0]))], cfg)
    assert len(vp.patches) == 3


def test_attach_skips_locked_point():
    pyr = textured_pyramid()
    vp = VisualMapPoint(position=np.array([0.0, 0.0, 3.0]), normal=np.array([0.0, 0.0, -1.0]))
    patch = Patch(pyr, np.array([160.0, 120.0]), np.eye(3), np.zeros(3), 1.0, 0)
    with vp.lock:
        assert not vp.attach(patch, [160.0, 120.0])
    assert vp.attach(patch, [160.0, 120.0]) and len(vp.patches) == 1
