"""Visual submap selection, plane-induced warps and sparse-direct photometric residuals."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from . import so3
from .esikf import MeasurementBatch
from .image import PinholeCamera, world_to_camera
from .patches import VisualMapPoint, cell_index, gradient_patches, patch_offsets, sample_patches
from .state import DIM, EXPO, Extrinsics, NavState
from .voxelmap import decode, encode, lattice

log = logging.getLogger(__name__)


@dataclass
class VisualConfig:
    patch_size: int = 8
    levels: int = 3
    grid_cell: int = 30
    photometric_noise: float = 100.0
    depth_map_scale: int = 4
    neighborhood: int = 9          # occlusion window side, image pixels
    occlusion_margin: float = 0.3
    discontinuity: float = 1.5
    max_view_angle_deg: float = 80.0
    jacobian_mode: str = "inverse"

    @property
    def border(self) -> int:
        return (self.patch_size // 2) * (1 << (self.levels - 1)) + 2


@dataclass
class RaycastConfig:
    d_min: float = 0.5
    d_max: float = 10.0
    samples: int = 40
    grid_cell: int = 30
    hit_band: float = 0.5

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError("raycast requires 0 < d_min < d_max")


@dataclass
class SubmapEntry:
    point: VisualMapPoint
    uv: np.ndarray
    depth: float
    from_raycast: bool = False
    rejected: str | None = None
    warp: np.ndarray | None = None


@dataclass
class VisualSubmap:
    entries: list = field(default_factory=list)

    @property
    def retained(self) -> list:
        return [e for e in self.entries if e.rejected is None]

    def rejection_counts(self) -> dict:
        out = {}
        for e in self.entries:
            if e.rejected is not None:
                out[e.rejected] = out.get(e.rejected, 0) + 1
        return out


# -- warps --------------------------------------------------------------------------------------
def affine_warp(R_ref, t_ref, R_cur, t_cur, point, normal, cam: PinholeCamera,
                direction: str = "current_to_reference") -> np.ndarray:
    """First-order pixel map between two views induced by the plane through ``point``.

    Poses are camera-from-world. The result maps pixel offsets around the
    point's projection in the source view to offsets in the target view.
    """
    if direction == "current_to_reference":
        R_s, t_s, R_t, t_t = R_cur, t_cur, R_ref, t_ref
    elif direction == "reference_to_current":
        R_s, t_s, R_t, t_t = R_ref, t_ref, R_cur, t_cur
    else:
        raise ValueError(f"unknown warp direction {direction!r}")
    X = R_s @ point + t_s
    n_s = R_s @ normal
    d = float(n_s @ X)
    if abs(d) < 1e-9 * max(np.linalg.norm(X), 1.0):
        raise ValueError("plane passes through the camera center")
    R_ts = R_t @ R_s.T
    t_ts = t_t - R_ts @ t_s
    H = cam.K @ (R_ts + np.outer(t_ts, n_s / d)) @ cam.K_inv
    u = cam.project(X)
    w = H @ np.array([u[0], u[1], 1.0])
    h = w[:2] / w[2]
    return (H[:2, :2] - np.outer(h, H[2, :2])) / w[2]


def affine_warps(R_refs, t_refs, R_cur, t_cur, points, normals, cam: PinholeCamera):
    """Batched :func:`affine_warp` from the current view to each point's reference view.

    Returns (A, ok) with A of shape (N, 2, 2); ``ok`` is False where the
    plane passes through the current camera center.
    """
    X = points @ R_cur.T + t_cur
    n_s = normals @ R_cur.T
    d = np.einsum("ij,ij->i", n_s, X)
    ok = np.abs(d) >= 1e-9 * np.maximum(np.linalg.norm(X, axis=1), 1.0)
    d = np.where(ok, d, 1.0)
    R_ts = R_refs @ R_cur.T
    t_ts = t_refs - R_ts @ t_cur
    H = cam.K @ (R_ts + t_ts[:, :, None] * (n_s / d[:, None])[:, None, :]) @ cam.K_inv
    u = cam.project(X)
    w = np.einsum("nij,nj->ni", H, np.c_[u, np.ones(len(u))])
    h = w[:, :2] / w[:, 2:3]
    A = (H[:, :2, :2] - h[:, :, None] * H[:, 2, None, :2]) / w[:, 2, None, None]
    return A, ok


def full_warp(R_ref, t_ref, R_cur, t_cur, point, normal, cam: PinholeCamera, pixels):
    """Exact plane-homography reprojection of current-view pixels into the reference view."""
    X = R_cur @ point + t_cur
    n_c = R_cur @ normal
    d = float(n_c @ X)
    R_rc = R_ref @ R_cur.T
    t_rc = t_ref - R_rc @ t_cur
    H = cam.K @ (R_rc + np.outer(t_rc, n_c / d)) @ cam.K_inv
    w = np.c_[pixels, np.ones(len(pixels))] @ H.T
    return w[:, :2] / w[:, 2:3]


# -- visibility ---------------------------------------------------------------------------------
def in_frustum(centers: np.ndarray, R_cw, t_cw, cam: PinholeCamera, radius: float) -> np.ndarray:
    pc = np.asarray(centers).reshape(-1, 3) @ R_cw.T + t_cw
    z = pc[:, 2]
    ok = z > -radius
    zc = np.maximum(z, 1e-3)
    slack_x = radius * cam.fx / zc
    slack_y = radius * cam.fy / zc
    u = cam.fx * pc[:, 0] / zc + cam.cx
    v = cam.fy * pc[:, 1] / zc + cam.cy
    ok &= (u >= -slack_x) & (u <= cam.width - 1 + slack_x)
    ok &= (v >= -slack_y) & (v <= cam.height - 1 + slack_y)
    return ok


def select_visible_voxels(voxel_map, touched_keys, previous_points, R_cw, t_cw,
                          cam: PinholeCamera) -> list:
    """Root keys hit by the scan or holding previously visible points, inside the frustum."""
    keys = set(touched_keys)
    for vp in previous_points:
        if vp.voxel_key is not None:
            keys.add(vp.voxel_key)
    keys = sorted(k for k in keys if k in voxel_map.voxels)
    if not keys:
        return []
    size = voxel_map.cfg.root_size
    centers = (np.array(keys, dtype=float) + 0.5) * size
    ok = in_frustum(centers, R_cw, t_cw, cam, radius=0.5 * np.sqrt(3.0) * size)
    return [k for k, good in zip(keys, ok) if good]


def project_points(points, R_cw, t_cw, cam: PinholeCamera, border: float):
    pos = np.array([vp.position for vp in points]).reshape(-1, 3)
    pc = pos @ R_cw.T + t_cw
    depth = pc[:, 2]
    uv = np.full((len(pc), 2), -1e9)
    front = depth > 1e-3
    uv[front] = cam.project(pc[front])
    ok = front & cam.in_image(uv, border)
    return uv, depth, ok


def raycast_on_demand(voxel_map, R_cw, t_cw, cam: PinholeCamera, occupied: set,
                      cfg: RaycastConfig, border: float = 0.0, exclude=()) -> list:
    """March the central ray of every unoccupied grid cell through the map.

    At the first sample whose neighbouring root voxels hold visual points
    projecting into the cell, those points are adopted (together with hits
    within ``hit_band`` meters further along the ray) and the ray stops.
    Returns a list of SubmapEntry flagged ``from_raycast``.
    """
    vkeys = voxel_map.visual_keys()
    if len(vkeys) == 0:
        return []
    codes = np.sort(encode(vkeys))
    size = voxel_map.cfg.root_size
    cell = cfg.grid_cell
    cols, rows = -(-cam.width // cell), -(-cam.height // cell)
    R_wc = R_cw.T
    cam_center = -R_wc @ t_cw
    z = np.linspace(cfg.d_min, cfg.d_max, cfg.samples)
    half = 0.5 * cell / min(cam.fx, cam.fy) * z
    ext = np.abs(R_wc[:, :2]).sum(axis=1)
    step = (z[1] - z[0]) if len(z) > 1 else 0.0
    skip = {id(vp) for vp in exclude}
    found = []
    free = np.array([c for c in range(rows * cols) if c not in occupied], dtype=np.int64)
    if len(free) == 0:
        return found
    cy, cx = np.divmod(free, cols)
    uv_c = np.stack([np.minimum((cx + 0.5) * cell, cam.width - 1.0),
                     np.minimum((cy + 0.5) * cell, cam.height - 1.0)], axis=1)
    rays = cam.ray(uv_c) @ R_cw                        # world-frame directions, (C, 3)
    samples = cam_center + z[None, :, None] * rays[:, None, :]
    e = half[None, :, None] * ext + 0.5 * step * np.abs(rays)[:, None, :]
    lo = lattice(samples - e, size)
    hi = lattice(samples + e, size)
    span = int((hi - lo).max()) + 1
    g = np.arange(span)
    grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    cand_all = lo[:, :, None, :] + grid
    cc = encode(cand_all)
    pos = np.clip(np.searchsorted(codes, cc), 0, len(codes) - 1)
    hit_all = np.all(cand_all <= hi[:, :, None, :], axis=3) & (codes[pos] == cc)
    # every visual point in any voxel touched by any ray, projected once
    pts, pcode, prank = [], [], []
    hit_codes = np.unique(cc[hit_all])
    for code, key in zip(hit_codes.tolist(), decode(hit_codes).tolist()):
        for r, vp in enumerate(voxel_map.visual_points_in([tuple(key)])):
            if id(vp) not in skip:
                pts.append(vp)
                pcode.append(code)
                prank.append(r)
    if not pts:
        return found
    pcode, prank = np.array(pcode), np.array(prank)
    uv, depth, ok = project_points(pts, R_cw, t_cw, cam, border)
    good = ok & (depth >= cfg.d_min) & (depth <= cfg.d_max)
    pcell = np.where(good, cell_index(np.where(ok[:, None], uv, 0.0), cam, cell), -1)
    for ci, c in enumerate(free.tolist()):
        mine = np.nonzero(pcell == c)[0]
        if len(mine) == 0:
            continue
        # (sample, grid slot, point) where the ray passes through the point's voxel
        m = (cc[ci][:, :, None] == pcode[mine]) & hit_all[ci][:, :, None]
        on_ray = m.any(axis=(0, 1))
        mine, m = mine[on_ray], m[:, :, on_ray]
        if len(mine) == 0:
            continue
        j_first = m.any(axis=1).argmax(axis=0)
        g_first = m[j_first, :, np.arange(len(mine))].argmax(axis=1)
        z_hit = z[j_first.min()]
        keep = z[j_first] <= z_hit + cfg.hit_band
        order = np.lexsort((prank[mine], g_first, j_first))
        for k in order[keep[order]]:
            i = mine[k]
            found.append(SubmapEntry(pts[i], uv[i], float(depth[i]), from_raycast=True))
    return found


def build_depth_map(points_world, R_cw, t_cw, cam: PinholeCamera, scale: int = 4) -> np.ndarray:
    """Nearest depth per (scale x scale) pixel block; inf where no return."""
    h, w = -(-cam.height // scale), -(-cam.width // scale)
    depth = np.full((h, w), np.inf)
    if len(points_world) == 0:
        return depth
    pc = np.asarray(points_world) @ R_cw.T + t_cw
    front = pc[:, 2] > 1e-3
    pc = pc[front]
    uv = cam.project(pc)
    ok = cam.in_image(uv)
    uv, d = uv[ok], pc[ok, 2]
    ix = (np.rint(uv[:, 0]) // scale).astype(int)
    iy = (np.rint(uv[:, 1]) // scale).astype(int)
    ix = np.clip(ix, 0, w - 1)
    iy = np.clip(iy, 0, h - 1)
    np.minimum.at(depth, (iy, ix), d)
    return depth


def reject_outliers(entries, depth_map: np.ndarray, R_cw, t_cw, cam: PinholeCamera,
                    cfg: VisualConfig) -> list:
    """Tag entries with a rejection reason; returns the same list.

    Keeps the nearest point per grid cell, then tests occlusion and depth
    discontinuity against the scan depth map and the current and reference
    viewing angles.
    """
    live = [e for e in entries if e.rejected is None]
    if not live:
        return entries
    uv = np.array([e.uv for e in live])
    cells = cell_index(uv, cam, cfg.grid_cell)
    best = {}
    for e, c in zip(live, cells):
        c = int(c)
        if c not in best or e.depth < best[c].depth:
            best[c] = e
    for e, c in zip(live, cells):
        if best[int(c)] is not e:
            e.rejected = "cell_occluded"
    cos_max = np.cos(np.radians(cfg.max_view_angle_deg))
    cam_center = -R_cw.T @ t_cw
    s = cfg.depth_map_scale
    # neighborhood is given in image pixels; convert to depth-map cells
    h = max(1, -(-(cfg.neighborhood // 2) // s))
    H, W = depth_map.shape
    lo_map = minimum_filter(depth_map, size=2 * h + 1, mode="constant", cval=np.inf)
    hi_map = maximum_filter(np.where(np.isfinite(depth_map), depth_map, -np.inf),
                            size=2 * h + 1, mode="constant", cval=-np.inf)
    live = [e for e in live if e.rejected is None]
    if not live:
        return entries
    uv = np.array([e.uv for e in live])
    ix = np.clip(np.rint(uv[:, 0]) // s, 0, W - 1).astype(int)
    iy = np.clip(np.rint(uv[:, 1]) // s, 0, H - 1).astype(int)
    lo, hi = lo_map[iy, ix], hi_map[iy, ix]
    depth = np.array([e.depth for e in live])
    seen = np.isfinite(lo)
    occluded = seen & (depth > lo + cfg.occlusion_margin)
    broken = seen & ~occluded & (hi - lo > cfg.discontinuity)
    pos = np.array([e.point.position for e in live])
    nrm = np.array([e.point.normal for e in live])
    ref_c = np.array([e.point.ref_patch.camera_center for e in live])

    def cosine(center):
        ray = pos - center
        return np.abs(np.einsum("ij,ij->i", nrm, ray)) / np.linalg.norm(ray, axis=1)

    oblique = (cosine(cam_center) < cos_max) | (cosine(ref_c) < cos_max)
    for e, a, b, c in zip(live, occluded, broken, oblique):
        if a:
            e.rejected = "occluded"
        elif b:
            e.rejected = "depth_discontinuity"
        elif c:
            e.rejected = "view_angle"
    return entries


def build_submap(voxel_map, touched_keys, previous_points, scan_world, cam: PinholeCamera,
                 R_cw, t_cw, cfg: VisualConfig, ray_cfg: RaycastConfig | None,
                 depth_map: np.ndarray | None = None) -> VisualSubmap:
    """Voxel query, on-demand raycasting and outlier rejection for one frame."""
    keys = select_visible_voxels(voxel_map, touched_keys, previous_points, R_cw, t_cw, cam)
    pts = [vp for vp in voxel_map.visual_points_in(keys) if vp.patches]
    entries = []
    if pts:
        uv, depth, ok = project_points(pts, R_cw, t_cw, cam, cfg.border)
        entries = [SubmapEntry(vp, u, float(d)) for vp, u, d, g in zip(pts, uv, depth, ok) if g]
    if ray_cfg is not None:
        occupied = set()
        if entries:
            occupied = set(cell_index(np.array([e.uv for e in entries]), cam,
                                      ray_cfg.grid_cell).tolist())
        entries += raycast_on_demand(voxel_map, R_cw, t_cw, cam, occupied, ray_cfg,
                                     cfg.border, exclude=[e.point for e in entries])
    if depth_map is None:
        depth_map = build_depth_map(scan_world, R_cw, t_cw, cam, cfg.depth_map_scale)
    reject_outliers(entries, depth_map, R_cw, t_cw, cam, cfg)
    live = [e for e in entries if e.rejected is None]
    if live:
        refs = [e.point.ref_patch for e in live]
        A, ok = affine_warps(np.array([r.R_cw for r in refs]), np.array([r.t_cw for r in refs]),
                             R_cw, t_cw, np.array([e.point.position for e in live]),
                             np.array([e.point.normal for e in live]), cam)
        for e, a, good in zip(live, A, ok):
            if good:
                e.warp = a
            else:
                e.rejected = "degenerate_warp"
    return VisualSubmap(entries)


# -- photometric model ----------------------------------------------------------------------
def camera_point_jacobian(state: NavState, points: np.ndarray, ext: Extrinsics | None):
    """Camera-frame points and d(p_c)/d(rotation error, position error), shape (N, 3, 6)."""
    R_ci = np.eye(3) if ext is None else ext.R_ci
    R_cw, t_cw = world_to_camera(state, ext)
    pc = points @ R_cw.T + t_cw
    body = (points - state.position) @ state.rotation
    J = np.empty((len(points), 3, 6))
    J[:, :, 0:3] = R_ci @ so3.skew_batch(body)
    J[:, :, 3:6] = -R_cw
    return pc, J


class PhotometricLevel:
    """Measurement provider for one pyramid level of the visual update.

    Reference intensities (and, in inverse mode, their gradients mapped
    through the warp) are computed once at construction; each call only
    projects points and samples the current image.
    """

    def __init__(self, entries, pyramid, cam: PinholeCamera, ext: Extrinsics | None, level: int,
                 cfg: VisualConfig | None = None, mode: str | None = None):
        self.cfg = cfg or VisualConfig()
        self.mode = mode or self.cfg.jacobian_mode
        if self.mode not in ("inverse", "forward"):
            raise ValueError(f"unknown jacobian mode {self.mode!r}")
        self.pyramid = pyramid
        self.cam = cam
        self.ext = ext
        self.level = level
        stride = float(1 << level)
        self.offsets = patch_offsets(self.cfg.patch_size) * stride
        m = len(self.offsets)
        self.points = np.zeros((0, 3))
        self.ref_vals = np.zeros((0, m))
        self.ref_grad = np.zeros((0, m, 2)) if self.mode == "inverse" else None
        if entries:
            refs = [e.point.ref_patch for e in entries]
            A = np.stack([np.eye(2) if e.warp is None else e.warp for e in entries])
            ruv = (np.array([r.center for r in refs])[:, None, :]
                   + np.einsum("mj,nij->nmi", self.offsets, A))
            vals, ok = sample_patches(refs, level, ruv)
            keep = ok.all(axis=1)
            inv = np.array([r.inv_exposure for r in refs])
            self.points = np.array([e.point.position for e in entries]).reshape(-1, 3)[keep]
            self.ref_vals = (inv[:, None] * vals)[keep]
            if self.mode == "inverse":
                sel = np.nonzero(keep)[0]
                g = gradient_patches([refs[i] for i in sel], level, ruv[sel]) if len(sel) else \
                    np.zeros((0, m, 2))
                self.ref_grad = inv[sel, None, None] * np.einsum("nmj,njk->nmk", g, A[sel])
        self.last_rows = 0

    def __len__(self) -> int:
        return len(self.points)

    def residuals(self, state: NavState):
        """Per-point residual blocks, current samples, validity and camera points."""
        pc, Jpc = camera_point_jacobian(state, self.points, self.ext)
        z_ok = pc[:, 2] > 1e-3
        uv = self.cam.project(np.where(z_ok[:, None], pc, 1.0))
        cuv = uv[:, None, :] + self.offsets[None]
        vals, inside = self.pyramid.sample(self.level, cuv)
        margin = float(1 << self.level)
        lo = cuv - margin
        hi = cuv + margin
        h, w = self.pyramid.shape
        inside &= (lo[..., 0] >= 0) & (lo[..., 1] >= 0) & (hi[..., 0] <= w - 1) & (hi[..., 1] <= h - 1)
        ok = z_ok & inside.all(axis=1)
        r = state.inv_exposure * vals - self.ref_vals
        return r, vals, ok, pc, Jpc, cuv

    def __call__(self, state: NavState) -> MeasurementBatch:
        if len(self.points) == 0:
            return MeasurementBatch.empty()
        r, vals, ok, pc, Jpc, cuv = self.residuals(state)
        if not ok.any():
            self.last_rows = 0
            return MeasurementBatch.empty()
        r, vals, pc, Jpc, cuv = r[ok], vals[ok], pc[ok], Jpc[ok], cuv[ok]
        Juv = np.einsum("nij,njk->nik", self.cam.project_jacobian(pc), Jpc)
        if self.mode == "inverse":
            G = self.ref_grad[ok]
        else:
            G = state.inv_exposure * self.pyramid.gradient(self.level, cuv)
        n, m = r.shape
        J = np.zeros((n, m, DIM))
        J[:, :, 0:6] = np.einsum("npi,nik->npk", G, Juv)
        J[:, :, EXPO] = vals
        self.last_rows = n * m
        return MeasurementBatch(r.reshape(-1), J.reshape(-1, DIM), self.cfg.photometric_noise)


def visual_levels(entries, pyramid, cam, ext, cfg: VisualConfig, mode: str | None = None):
    """Per-level providers ordered coarsest to finest."""
    return [PhotometricLevel(entries, pyramid, cam, ext, lvl, cfg, mode)
            for lvl in range(cfg.levels - 1, -1, -1)]


def anchor_exposure(cov: np.ndarray) -> np.ndarray:
    """Zero the inverse-exposure variance so the first frame fixes the scale."""
    P = cov.copy()
    P[EXPO, :] = 0.0
    P[:, EXPO] = 0.0
    return P


def draw_overlay(image: np.ndarray, submap: VisualSubmap, size: int = 3) -> np.ndarray:
    """RGB debug view: retained points green, rejected red, raycast recalls blue-green."""
    gray = np.clip(np.asarray(image, dtype=float), 0, 255)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    h, w = gray.shape
    for e in submap.entries:
        x, y = int(round(e.uv[0])), int(round(e.uv[1]))
        if e.rejected is not None:
            color = (255, 0, 0)
        elif e.from_raycast:
            color = (0, 255, 255)
        else:
            color = (0, 255, 0)
        rgb[max(y - size, 0):min(y + size + 1, h), max(x - size, 0):min(x + size + 1, w)] = color
    return rgb
