"""Visual map points: patch capture, reference selection and normal refinement."""
from __future__ import annotations

import itertools
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .image import (PinholeCamera, bilinear, bilinear_stack, pixel_gradient_magnitude, to_level,
                    write_gray)

log = logging.getLogger(__name__)

_ids = itertools.count()


def patch_offsets(size: int) -> np.ndarray:
    """Integer (dx, dy) offsets of a size x size patch, row-major; {-4..3} for size 8."""
    r = np.arange(size) - size // 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1).astype(float)


class Patch:
    """Image data captured around a visual point's projection in one frame.

    Keeps, per pyramid level, a window of the capture image around the
    center so that warped offsets can be sampled later, plus the unwarped
    ``size`` x ``size`` pyramid used for similarity scoring.
    """

    def __init__(self, pyramid, center_px, R_cw, t_cw, inv_exposure: float, frame_id: int,
                 size: int = 8, window_half: int = 12):
        center = np.asarray(center_px, dtype=float)
        windows, pyr = _capture(pyramid, center[None], size, window_half)
        self._assign(center, R_cw, t_cw, inv_exposure, frame_id, size,
                     [(int(x0[0]), int(y0[0]), w[0], v[0]) for x0, y0, w, v in windows],
                     list(pyr[0]))

    def _assign(self, center, R_cw, t_cw, inv_exposure, frame_id, size, windows, pyramid):
        self.center = center
        self.R_cw = np.asarray(R_cw, dtype=float)
        self.t_cw = np.asarray(t_cw, dtype=float)
        self.inv_exposure = float(inv_exposure)
        self.frame_id = int(frame_id)
        self.size = size
        self.windows = windows
        self.pyramid = pyramid

    @property
    def camera_center(self) -> np.ndarray:
        return -self.R_cw.T @ self.t_cw

    @property
    def levels(self) -> int:
        return len(self.windows)

    def sample(self, level: int, uv: np.ndarray):
        """Bilinear sample of the capture image at level-0 pixel coords ``uv``."""
        uv = np.asarray(uv, dtype=float)
        vals, ok = sample_patches([self], level, uv.reshape(1, -1, 2))
        return vals.reshape(uv.shape[:-1]), ok.reshape(uv.shape[:-1])

    def gradient(self, level: int, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return gradient_patches([self], level, uv.reshape(1, -1, 2)).reshape(uv.shape)


def _capture(pyramid, centers: np.ndarray, size: int, window_half: int):
    """Per level: window origins, edge-clamped windows, valid bounds and patch pixels."""
    n = 2 * window_half + 2
    r = np.arange(n)
    offs = patch_offsets(size)
    windows, pyr = [], []
    for lvl, img in enumerate(pyramid.levels):
        h, w = img.shape
        c = to_level(centers, lvl)
        x0 = np.floor(c[:, 0]).astype(np.int64) - window_half
        y0 = np.floor(c[:, 1]).astype(np.int64) - window_half
        # clamped indices replicate the border, matching clamped bilinear sampling
        rows = np.clip(y0[:, None] + r, 0, h - 1)
        cols = np.clip(x0[:, None] + r, 0, w - 1)
        win = np.asarray(img, dtype=float)[rows[:, :, None], cols[:, None, :]]
        sx0, sy0 = np.maximum(x0, 0), np.maximum(y0, 0)
        sx1, sy1 = np.minimum(x0 + n, w), np.minimum(y0 + n, h)
        valid = np.stack([sx0 - x0, sy0 - y0, sx1 - x0 - 1, sy1 - y0 - 1], axis=1).astype(float)
        empty = (sx1 - sx0 < 2) | (sy1 - sy0 < 2)
        valid[empty] = (0.0, 0.0, -1.0, -1.0)
        windows.append((x0, y0, win, valid))
        q = to_level(centers[:, None, :] + offs * (1 << lvl), lvl)
        vals = bilinear_stack(win, q[..., 0] - x0[:, None], q[..., 1] - y0[:, None])
        pyr.append(vals.reshape(-1, size, size))
    return windows, [np.stack(lv, axis=0) for lv in zip(*pyr)] if len(centers) else []


def capture_patches(pyramid, centers, R_cw, t_cw, inv_exposure: float, frame_id: int,
                    size: int = 8, window_half: int = 12) -> list:
    """Patches for many pixel centers of one frame in a single batched capture."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    if len(centers) == 0:
        return []
    windows, pyr = _capture(pyramid, centers, size, window_half)
    out = []
    for i in range(len(centers)):
        p = Patch.__new__(Patch)
        p._assign(centers[i], R_cw, t_cw, inv_exposure, frame_id, size,
                  [(int(x0[i]), int(y0[i]), w[i], v[i]) for x0, y0, w, v in windows],
                  list(pyr[i]))
        out.append(p)
    return out


def _window_coords(patches, level: int, uv: np.ndarray):
    stack = np.stack([p.windows[level][2] for p in patches])
    origin = np.array([p.windows[level][:2] for p in patches], dtype=float)
    valid = np.stack([p.windows[level][3] for p in patches])
    q = to_level(uv, level) - origin[:, None, :]
    return stack, q, valid


def sample_patches(patches, level: int, uv: np.ndarray):
    """Sample each patch's capture window at its own level-0 coords ``uv`` (N, M, 2)."""
    if not all(isinstance(p, Patch) for p in patches):
        pairs = [p.sample(level, q) for p, q in zip(patches, uv)]
        return (np.array([v for v, _ in pairs]).reshape(uv.shape[:-1]),
                np.array([k for _, k in pairs]).reshape(uv.shape[:-1]))
    stack, q, valid = _window_coords(patches, level, uv)
    x, y = q[..., 0], q[..., 1]
    ok = ((x >= valid[:, 0:1]) & (y >= valid[:, 1:2])
          & (x <= valid[:, 2:3]) & (y <= valid[:, 3:4]))
    return bilinear_stack(stack, x, y), ok


def gradient_patches(patches, level: int, uv: np.ndarray) -> np.ndarray:
    """Central-difference intensity gradient per level-0 pixel, shape (N, M, 2)."""
    if not all(isinstance(p, Patch) for p in patches):
        return np.array([p.gradient(level, q) for p, q in zip(patches, uv)]).reshape(uv.shape)
    stack, q, _ = _window_coords(patches, level, uv)
    x, y = q[..., 0], q[..., 1]
    m = x.shape[1]
    v = bilinear_stack(stack, np.concatenate([x + 1, x - 1, x, x], axis=1),
                       np.concatenate([y, y, y + 1, y - 1], axis=1))
    gx = 0.5 * (v[:, :m] - v[:, m:2 * m])
    gy = 0.5 * (v[:, 2 * m:3 * m] - v[:, 3 * m:])
    return np.stack([gx, gy], axis=-1) / float(1 << level)


@dataclass(eq=False)
class VisualMapPoint:
    position: np.ndarray
    normal: np.ndarray
    normal_cov: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    patches: list = field(default_factory=list)
    reference: int = 0
    normal_converged: bool = False
    last_patch_frame_id: int = -1
    last_patch_pixel: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))
    voxel_key: tuple | None = None
    id: int = field(default_factory=lambda: next(_ids))
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    scores: list = field(default_factory=list, repr=False)

    @property
    def ref_patch(self) -> Patch | None:
        return self.patches[self.reference] if self.patches else None

    def normal_in_reference(self) -> np.ndarray:
        return self.ref_patch.R_cw @ self.normal

    def position_in_reference(self) -> np.ndarray:
        p = self.ref_patch
        return p.R_cw @ self.position + p.t_cw

    def attach(self, patch: Patch, pixel) -> bool:
        """Append a patch unless a refinement worker currently owns the point."""
        if self.normal_converged or not self.lock.acquire(blocking=False):
            return False
        try:
            self.patches.append(patch)
            self.last_patch_frame_id = patch.frame_id
            self.last_patch_pixel = np.asarray(pixel, dtype=float)
        finally:
            self.lock.release()
        return True


def ncc(f: np.ndarray, g: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation; 0 when either patch is flat."""
    a = np.asarray(f, dtype=float).ravel()
    b = np.asarray(g, dtype=float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den < 1e-12:
        return 0.0
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def view_cosine(normal: np.ndarray, point: np.ndarray, camera_center: np.ndarray) -> float:
    """|cos| of the angle between the surface normal and the viewing ray."""
    ray = np.asarray(point) - np.asarray(camera_center)
    return float(abs(np.dot(normal, ray)) / np.linalg.norm(ray))


def score_patch(f: Patch, others, normal: np.ndarray, point: np.ndarray,
                normal_cov: np.ndarray | None = None) -> float:
    """Consensus-plus-geometry score of a candidate reference patch."""
    others = list(others)
    if not others:
        raise ValueError("score_patch needs at least one other patch")
    tr = 0.0 if normal_cov is None else float(np.trace(normal_cov))
    w = float(expit(-tr))
    mean_ncc = float(np.mean([ncc(f.pyramid[0], g.pyramid[0]) for g in others]))
    c = view_cosine(normal, point, f.camera_center)
    return (1.0 - w) * mean_ncc + w * c


def update_reference(point: VisualMapPoint) -> int:
    """Select the highest-scoring patch as reference (ties go to the latest capture)."""
    n = len(point.patches)
    if n < 2 or point.normal_converged:
        return point.reference
    # all pairwise NCCs at once; the per-patch mean excludes the diagonal
    P = np.array([f.pyramid[0].ravel() for f in point.patches])
    P = P - P.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.einsum("ij,ij->i", P, P))
    flat = norm < 1e-6
    C = np.clip((P @ P.T) / np.where(flat, 1.0, norm)[:, None] / np.where(flat, 1.0, norm)[None],
                -1.0, 1.0)
    C[flat, :] = 0.0
    C[:, flat] = 0.0
    mean_ncc = (C.sum(axis=1) - np.diag(C)) / (n - 1)
    tr = 0.0 if point.normal_cov is None else float(np.trace(point.normal_cov))
    w = float(expit(-tr))
    centers = np.array([f.camera_center for f in point.patches])
    rays = point.position - centers
    cos = np.abs(rays @ point.normal) / np.linalg.norm(rays, axis=1)
    scores = (1.0 - w) * mean_ncc + w * cos
    best, best_key = 0, None
    for i, f in enumerate(point.patches):
        key = (scores[i], f.frame_id, i)
        if best_key is None or key >= best_key:
            best, best_key = i, key
    point.reference = best
    point.scores = scores.tolist()
    return best


# -- plane-normal parameterization and refinement ----------------------------------------
def normal_basis(p_ref: np.ndarray):
    """B, b with M = B m + b satisfying p_ref^T M = 1 for every m."""
    p = np.asarray(p_ref, dtype=float)
    if abs(p[2]) < 1e-12:
        raise ValueError("reference point depth must be non-zero")
    B = np.array([[1.0, 0.0], [0.0, 1.0], [-p[0] / p[2], -p[1] / p[2]]])
    b = np.array([0.0, 0.0, 1.0 / p[2]])
    return B, b


def parameterize_normal(n: np.ndarray, p_ref: np.ndarray) -> np.ndarray:
    """m = first two components of n / (n^T p_ref)."""
    n = np.asarray(n, dtype=float)
    d = float(np.dot(n, p_ref))
    if abs(d) < 1e-12:
        raise ValueError("plane passes through the camera center")
    return (n / d)[:2]


def normal_from_parameter(m: np.ndarray, p_ref: np.ndarray, hint: np.ndarray | None = None):
    """Unit normal from m, with the sign matching ``hint`` when given."""
    B, b = normal_basis(p_ref)
    M = B @ m + b
    n = M / np.linalg.norm(M)
    if hint is not None and np.dot(n, hint) < 0:
        n = -n
    return n


def plane_homography(K: np.ndarray, R_tr: np.ndarray, t_tr: np.ndarray, M: np.ndarray):
    """Pixel homography from a source view to a target view for plane M^T X = 1 (source)."""
    return K @ (R_tr + np.outer(t_tr, M)) @ np.linalg.inv(K)


@dataclass
class RefineResult:
    normal: np.ndarray
    converged: bool
    iterations: int
    costs: list
    aborted: bool = False
    patches_used: int = 0


class NormalObjective:
    """Photometric cost over m between the reference patch and other patches."""

    def __init__(self, point: VisualMapPoint, cam: PinholeCamera, patch_size: int = 11,
                 max_patches: int = 8):
        ref = point.ref_patch
        self.ref = ref
        others = [p for i, p in enumerate(point.patches) if i != point.reference]
        self.others = others[-max_patches:]
        self.cam = cam
        self.K = cam.K
        self.K_inv = np.linalg.inv(self.K)
        self.p_ref = ref.R_cw @ point.position + ref.t_cw
        self.B, self.b = normal_basis(self.p_ref)
        u0 = cam.project(self.p_ref)
        self.pix = u0 + patch_offsets(patch_size) + 0.5 * ((patch_size + 1) % 2)
        self.ref_vals, self.ref_ok = ref.sample(0, self.pix)
        self.rays = np.c_[self.pix, np.ones(len(self.pix))] @ self.K_inv.T
        self.rel = []
        for p in self.others:
            R = p.R_cw @ ref.R_cw.T
            self.rel.append((R, p.t_cw - R @ ref.t_cw))

    def residuals(self, m: np.ndarray, with_jacobian: bool = False):
        M = self.B @ m + self.b
        res, jac = [], []
        for p, (R, t) in zip(self.others, self.rel):
            X = self.rays @ R.T + np.outer(self.rays @ M, t)
            w = X @ self.K.T
            h = w[:, :2] / w[:, 2:3]
            vals, ok = p.sample(0, h)
            ok &= self.ref_ok
            r = p.inv_exposure * vals - self.ref.inv_exposure * self.ref_vals
            res.append(np.where(ok, r, 0.0))
            if with_jacobian:
                g = p.inv_exposure * p.gradient(0, h)
                dh_dw = np.zeros((len(h), 2, 3))
                dh_dw[:, 0, 0] = 1.0 / w[:, 2]
                dh_dw[:, 1, 1] = 1.0 / w[:, 2]
                dh_dw[:, :, 2] = -h / w[:, 2:3]
                Kt = self.K @ t
                # dX/dM = t y^T so dw/dm = K t (y^T B)
                dh_dM = np.einsum("nij,j->ni", dh_dw, Kt)[:, :, None] * self.rays[:, None, :]
                J = np.einsum("ni,nij,jk->nk", g, dh_dM, self.B)
                jac.append(np.where(ok[:, None], J, 0.0))
        r = np.concatenate(res) if res else np.zeros(0)
        if with_jacobian:
            return r, (np.vstack(jac) if jac else np.zeros((0, 2)))
        return r

    def cost(self, m: np.ndarray) -> float:
        r = self.residuals(m)
        return float(r @ r)


def refine_normal(point: VisualMapPoint, cam: PinholeCamera, max_iters: int = 20,
                  patch_size: int = 11, max_patches: int = 8, tol: float = 1e-4,
                  min_patches: int = 4, apply: bool = True) -> RefineResult:
    """Gauss-Newton refinement of a visual point's plane normal.

    Convergence needs two consecutive steps below ``tol`` with at least
    ``min_patches`` patches (reference included). On convergence with
    ``apply`` the normal is frozen and all non-reference patches are dropped.
    """
    if len(point.patches) < 2:
        raise ValueError("normal refinement needs at least two patches")
    obj = NormalObjective(point, cam, patch_size, max_patches)
    n_ref = point.normal_in_reference()
    m = parameterize_normal(n_ref, obj.p_ref)
    costs = [obj.cost(m)]
    small, rises, converged, aborted = 0, 0, False, False
    used = len(obj.others) + 1
    it = 0
    for it in range(1, max_iters + 1):
        r, J = obj.residuals(m, with_jacobian=True)
        A = J.T @ J
        if np.linalg.cond(A) > 1e12:
            aborted = True
            break
        dm = -np.linalg.solve(A, J.T @ r)
        m = m + dm
        costs.append(obj.cost(m))
        rises = rises + 1 if costs[-1] > costs[-2] else 0
        if rises >= 3:
            aborted = True
            break
        small = small + 1 if np.linalg.norm(dm) < tol else 0
        if small >= 2 and used >= min_patches:
            converged = True
            break
    if aborted:
        return RefineResult(point.normal.copy(), False, it, costs, True, used)
    n_new_ref = normal_from_parameter(m, obj.p_ref, hint=n_ref)
    n_world = obj.ref.R_cw.T @ n_new_ref
    if converged and apply:
        point.normal = n_world
        point.normal_converged = True
        point.patches = [obj.ref]
        point.reference = 0
    return RefineResult(n_world, converged, it, costs, False, used)


class NormalRefiner:
    """Background worker refining normals of queued points one at a time.

    The worker holds a point's lock for the whole refinement; the pipeline's
    patch attachment skips locked points.
    """

    def __init__(self, cam: PinholeCamera, threaded: bool = True, **kwargs):
        self.cam = cam
        self.kwargs = kwargs
        self.threaded = threaded
        self.results: dict[int, RefineResult] = {}
        self._queue: queue.Queue = queue.Queue()
        self._thread = None
        if threaded:
            self._thread = threading.Thread(target=self._run, daemon=True)
            self._thread.start()

    def submit(self, point: VisualMapPoint) -> None:
        if point.normal_converged or len(point.patches) < 2:
            return
        if self.threaded:
            self._queue.put(point)
        else:
            self._refine(point)

    def _refine(self, point: VisualMapPoint) -> None:
        if not point.lock.acquire(blocking=False):
            return
        try:
            if not point.normal_converged:
                self.results[point.id] = refine_normal(point, self.cam, **self.kwargs)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.debug("normal refinement skipped for point %d: %s", point.id, exc)
        finally:
            point.lock.release()

    def _run(self) -> None:
        while True:
            point = self._queue.get()
            if point is None:
                break
            self._refine(point)
            self._queue.task_done()

    def close(self) -> None:
        if self._thread is not None:
            self._queue.join()
            self._queue.put(None)
            self._thread.join()
            self._thread = None


# -- generation ------------------------------------------------------------------------------
@dataclass
class Candidates:
    """LiDAR map points eligible for promotion, with their plane data."""

    points: np.ndarray
    normals: np.ndarray
    normal_covs: np.ndarray
    keys: np.ndarray  # (N, 3) root voxel keys

    @classmethod
    def empty(cls) -> "Candidates":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3, 3)),
                   np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class GenerationConfig:
    grid_cell: int = 30
    patch_size: int = 8
    min_gradient: float = 5.0
    max_view_angle_deg: float = 80.0
    reattach_frames: int = 20
    reattach_pixels: float = 40.0
    border: int = 18


def cell_index(uv: np.ndarray, cam: PinholeCamera, cell: int) -> np.ndarray:
    cols = -(-cam.width // cell)
    return (uv[:, 1] // cell).astype(np.int64) * cols + (uv[:, 0] // cell).astype(np.int64)


def generate_visual_points(pyramid, cam: PinholeCamera, R_cw, t_cw, inv_exposure: float,
                           frame_id: int, candidates: Candidates, existing, cfg: GenerationConfig,
                           blocked=None):
    """Promote candidates in empty grid cells and refresh patches of existing points.

    ``existing`` is a sequence of (VisualMapPoint, pixel) for points already
    projected in this frame. ``blocked`` optionally lists further pixels whose
    cells count as occupied without refreshing anything.
    Returns (new_points, refreshed_points).
    """
    img = pyramid.levels[0]
    occupied = set()
    if blocked is not None and len(blocked):
        occupied.update(cell_index(np.asarray(blocked, float).reshape(-1, 2), cam,
                                   cfg.grid_cell).tolist())
    refreshed = []
    cell = cfg.grid_cell
    cos_max = np.cos(np.radians(cfg.max_view_angle_deg))
    cam_center = -np.asarray(R_cw).T @ t_cw
    stale = []
    if len(existing):
        ex_uv = np.array([uv for _, uv in existing], dtype=float).reshape(-1, 2)
        occupied.update(cell_index(ex_uv, cam, cell).tolist())
        for (vp, uv) in existing:
            if vp.normal_converged:
                continue
            drift = np.linalg.norm(np.asarray(uv) - vp.last_patch_pixel)
            if (frame_id - vp.last_patch_frame_id >= cfg.reattach_frames
                    or not drift < cfg.reattach_pixels):
                stale.append((vp, uv))
    patches = capture_patches(pyramid, [uv for _, uv in stale], R_cw, t_cw, inv_exposure,
                              frame_id, cfg.patch_size)
    for (vp, uv), patch in zip(stale, patches):
        if vp.attach(patch, uv):
            refreshed.append(vp)
    new_points = []
    if len(candidates) == 0:
        return new_points, refreshed
    pc = candidates.points @ np.asarray(R_cw).T + t_cw
    front = pc[:, 2] > 0.1
    uv = np.full((len(pc), 2), -1e9)
    uv[front] = cam.project(pc[front])
    ok = front & cam.in_image(uv, cfg.border)
    rays = candidates.points - cam_center
    cosv = np.abs(np.einsum("ij,ij->i", rays, candidates.normals)) / np.linalg.norm(rays, axis=1)
    ok &= cosv >= cos_max
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return new_points, refreshed
    grad = pixel_gradient_magnitude(img, uv[idx])
    cells = cell_index(uv[idx], cam, cell)
    keep = grad >= cfg.min_gradient
    idx, grad, cells = idx[keep], grad[keep], cells[keep]
    # highest gradient per free cell; stable ordering keeps ties deterministic
    order = np.lexsort((-grad, cells))
    seen = set()
    chosen = []
    for j in order:
        c = int(cells[j])
        if c in occupied or c in seen:
            continue
        seen.add(c)
        chosen.append(idx[j])
    patches = capture_patches(pyramid, uv[chosen], R_cw, t_cw, inv_exposure, frame_id,
                              cfg.patch_size)
    for k, patch in zip(chosen, patches):
        vp = VisualMapPoint(position=candidates.points[k].copy(),
                            normal=candidates.normals[k].copy(),
                            normal_cov=candidates.normal_covs[k].copy(),
                            voxel_key=tuple(int(v) for v in candidates.keys[k]))
        vp.attach(patch, uv[k])
        new_points.append(vp)
    return new_points, refreshed


def dump_patches(points, directory, scale: int = 4) -> None:
    """Write one mosaic per point (level-0 patches side by side) and a score ledger."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["point_id patch frame_id score reference"]
    for vp in points:
        if not vp.patches:
            continue
        tiles = [np.kron(p.pyramid[0], np.ones((scale, scale))) for p in vp.patches]
        sep = np.full((tiles[0].shape[0], 2), 255.0)
        mosaic = np.hstack([np.hstack([t, sep]) for t in tiles])
        write_gray(out / f"point_{vp.id:06d}.pgm", mosaic)
        for i, p in enumerate(vp.patches):
            s = vp.scores[i] if i < len(vp.scores) else float("nan")
            lines.append(f"{vp.id} {i} {p.frame_id} {s:.6f} {int(i == vp.reference)}")
    (out / "scores.txt").write_text("\n".join(lines) + "\n")
