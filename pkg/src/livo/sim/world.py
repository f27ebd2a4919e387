"""Static worlds of textured rectangles with exact ray intersection and rendering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..image import PinholeCamera, bilinear
from .rng import stream_rng

TEXTURE_STREAM = 4
BACKGROUND = 128.0
ROOM_OCTAVES = ((0.6, 0.3), (0.25, 0.3), (0.1, 0.25), (0.05, 0.15))


@dataclass
class Texture:
    """Gray values on a regular texel grid covering a rectangle."""

    data: np.ndarray
    texel: float

    def sample(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Bilinear lookup at in-plane coordinates (meters from the rectangle corner)."""
        return bilinear(self.data, s / self.texel - 0.5, t / self.texel - 0.5)[0]


def value_noise(shape, cell: float, rng: np.random.Generator) -> np.ndarray:
    """Bilinearly interpolated random lattice; ``cell`` is the lattice spacing in texels."""
    gh = int(np.ceil(shape[0] / cell)) + 2
    gw = int(np.ceil(shape[1] / cell)) + 2
    grid = rng.uniform(0.0, 1.0, size=(gh, gw))
    y, x = np.mgrid[0:shape[0], 0:shape[1]]
    return bilinear(grid, (x + 0.5) / cell, (y + 0.5) / cell)[0]


def make_texture(kind: str, size_m, seed: int, index: int, texel: float = 0.02,
                 low: float = 40.0, high: float = 180.0, period: float = 0.5,
                 octaves=((0.6, 0.35), (0.25, 0.35), (0.1, 0.3))) -> Texture:
    h = max(int(np.ceil(size_m[1] / texel)), 2)
    w = max(int(np.ceil(size_m[0] / texel)), 2)
    if kind == "noise":
        rng = stream_rng(seed, TEXTURE_STREAM, index)
        acc = np.zeros((h, w))
        for scale, amp in octaves:
            acc += amp * value_noise((h, w), scale / texel, rng)
        data = low + (high - low) * acc
    elif kind == "checker":
        y, x = np.mgrid[0:h, 0:w]
        cells = (np.floor((x + 0.5) * texel / period) + np.floor((y + 0.5) * texel / period)) % 2
        data = np.where(cells > 0, high, low)
    elif kind == "gradient":
        x = (np.arange(w) + 0.5) / w
        data = np.tile(low + (high - low) * x, (h, 1))
    elif kind == "flat":
        data = np.full((h, w), 0.5 * (low + high))
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return Texture(data, texel)


@dataclass
class Rect:
    """Rectangle spanned by unit axes u, v around ``center`` with half extents."""

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half: tuple
    texture: Texture

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)


@dataclass
class SyntheticWorld:
    rects: list = field(default_factory=list)

    def __post_init__(self):
        self._stack()

    def _stack(self):
        n = len(self.rects)
        self.C = np.array([r.center for r in self.rects]).reshape(n, 3)
        self.U = np.array([r.u for r in self.rects]).reshape(n, 3)
        self.V = np.array([r.v for r in self.rects]).reshape(n, 3)
        self.N = np.cross(self.U, self.V).reshape(n, 3)
        self.H = np.array([r.half for r in self.rects], dtype=float).reshape(n, 2)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray, candidates=None):
        """Nearest hit per ray: (distance along dir, rect index, s, t); inf/-1 on miss.

        ``origins`` is one point or one per ray. ``candidates`` optionally maps
        rect index -> indices of rays worth testing against that rect.
        """
        dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
        origins = np.asarray(origins, dtype=float)
        shared = origins.ndim == 1
        n = len(dirs)
        best = np.full(n, np.inf)
        idx = np.full(n, -1)
        s_out = np.zeros(n)
        t_out = np.zeros(n)
        for k in range(len(self.rects)):
            if candidates is None:
                ids = None
                d = dirs
            else:
                ids = candidates.get(k)
                if ids is None or len(ids) == 0:
                    continue
                d = dirs[ids]
            den = d @ self.N[k]
            if shared:
                rel = origins - self.C[k]
                num = -(rel @ self.N[k])
            else:
                o = origins if ids is None else origins[ids]
                rel = o - self.C[k]
                num = -(rel @ self.N[k])
            with np.errstate(divide="ignore", invalid="ignore"):
                dist = num / den
            cur = best if ids is None else best[ids]
            hit = np.nonzero((dist > 1e-9) & (dist < cur))[0]
            if len(hit) == 0:
                continue
            dh = dist[hit]
            r = rel if shared else rel[hit]
            a = r @ self.U[k] + dh * (d[hit] @ self.U[k])
            b = r @ self.V[k] + dh * (d[hit] @ self.V[k])
            inside = (np.abs(a) <= self.H[k, 0]) & (np.abs(b) <= self.H[k, 1])
            sel = hit[inside] if ids is None else ids[hit[inside]]
            best[sel] = dh[inside]
            idx[sel] = k
            s_out[sel] = a[inside] + self.H[k, 0]
            t_out[sel] = b[inside] + self.H[k, 1]
        return best, idx, s_out, t_out

    def corners(self) -> np.ndarray:
        """Rectangle corners, shape (R, 4, 3)."""
        sx = self.H[:, 0:1, None] * self.U[:, None, :]
        sy = self.H[:, 1:2, None] * self.V[:, None, :]
        signs = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)
        return (self.C[:, None, :] + signs[None, :, 0:1] * sx + signs[None, :, 1:2] * sy)

    def shade(self, idx: np.ndarray, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        out = np.full(len(idx), BACKGROUND)
        for k in np.unique(idx[idx >= 0]):
            sel = idx == k
            out[sel] = self.rects[k].texture.sample(s[sel], t[sel])
        return out


def _clip_near(poly: np.ndarray, z_near: float = 1e-3) -> np.ndarray:
    """Clip a convex camera-frame polygon to z >= z_near."""
    out = []
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        if a[2] >= z_near:
            out.append(a)
        if (a[2] >= z_near) != (b[2] >= z_near):
            f = (z_near - a[2]) / (b[2] - a[2])
            out.append(a + f * (b - a))
    return np.array(out).reshape(-1, 3)


def _screen_candidates(world: SyntheticWorld, R_cw, t_cw, cam: PinholeCamera, u, v, margin=2.0):
    """Per rect, indices of pixels inside the bounding box of its projection."""
    pc = world.corners() @ R_cw.T + t_cw
    out = {}
    for k in range(len(world.rects)):
        poly = _clip_near(pc[k])
        if len(poly) == 0:
            continue
        uv = cam.project(poly)
        lo = uv.min(axis=0) - margin
        hi = uv.max(axis=0) + margin
        if hi[0] < 0 or hi[1] < 0 or lo[0] > cam.width or lo[1] > cam.height:
            continue
        out[k] = np.nonzero((u >= lo[0]) & (u <= hi[0]) & (v >= lo[1]) & (v <= hi[1]))[0]
    return out


def render_image(world: SyntheticWorld, R_cw: np.ndarray, t_cw: np.ndarray, cam: PinholeCamera,
                 exposure: float = 1.0, supersample: int = 2) -> np.ndarray:
    """Gray raster of the world seen from a camera-from-world pose."""
    ss = max(int(supersample), 1)
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    y, x = np.mgrid[0:cam.height, 0:cam.width]
    dx, dy = np.meshgrid(sub, sub)
    u = (x.ravel()[None, :] + dx.ravel()[:, None]).ravel()
    v = (y.ravel()[None, :] + dy.ravel()[:, None]).ravel()
    R_wc = R_cw.T
    origin = -R_wc @ t_cw
    dirs = cam.ray(np.stack([u, v], axis=1)) @ R_wc.T
    cand = _screen_candidates(world, R_cw, t_cw, cam, u, v)
    _, idx, s, t = world.intersect(origin, dirs, cand)
    vals = world.shade(idx, s, t).reshape(ss * ss, -1).mean(axis=0)
    img = vals * exposure
    return np.clip(img, 0.0, 255.0).reshape(cam.height, cam.width)


def axis_rect(center, normal_axis: int, sign: float, size, texture: Texture) -> Rect:
    """Axis-aligned rectangle whose normal is ``sign`` times a coordinate axis."""
    n = np.zeros(3)
    n[normal_axis] = sign
    others = [a for a in range(3) if a != normal_axis]
    u = np.zeros(3)
    u[others[0]] = 1.0
    v = np.cross(n, u)
    return Rect(np.asarray(center, float), u, v, (size[0] / 2, size[1] / 2), texture)


def box_room(seed: int, half_x: float = 8.13, half_y: float = 8.07, floor: float = -1.23,
             ceiling: float = 2.77, box_half=(1.03, 0.97, 0.83), texel: float = 0.02) -> SyntheticWorld:
    """Closed room with noise-textured surfaces, a central box and four pillars."""
    rects = []
    k = 0

    def tex(size):
        nonlocal k
        k += 1
        return make_texture("noise", size, seed, k, texel, octaves=ROOM_OCTAVES)

    h = ceiling - floor
    zc = 0.5 * (ceiling + floor)
    rects.append(axis_rect([half_x, 0, zc], 0, -1, (2 * half_y, h), tex((2 * half_y, h))))
    rects.append(axis_rect([-half_x, 0, zc], 0, 1, (2 * half_y, h), tex((2 * half_y, h))))
    rects.append(axis_rect([0, half_y, zc], 1, -1, (2 * half_x, h), tex((2 * half_x, h))))
    rects.append(axis_rect([0, -half_y, zc], 1, 1, (2 * half_x, h), tex((2 * half_x, h))))
    rects.append(axis_rect([0, 0, floor], 2, 1, (2 * half_x, 2 * half_y),
                           tex((2 * half_x, 2 * half_y))))
    rects.append(axis_rect([0, 0, ceiling], 2, -1, (2 * half_x, 2 * half_y),
                           tex((2 * half_x, 2 * half_y))))
    bx, by, bz = box_half
    bzc = floor + bz
    for axis, half_n, sz in ((0, bx, (2 * by, 2 * bz)), (1, by, (2 * bx, 2 * bz))):
        for sign in (1, -1):
            c = np.zeros(3)
            c[axis] = sign * half_n
            c[2] = bzc
            rects.append(axis_rect(c, axis, sign, sz, tex(sz)))
    rects.append(axis_rect([0, 0, floor + 2 * bz], 2, 1, (2 * bx, 2 * by), tex((2 * bx, 2 * by))))
    for px, py in ((6.07, 6.11), (-6.09, 6.03), (6.01, -6.13), (-6.11, -6.07)):
        for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1)):
            c = np.array([px, py, zc])
            c[axis] += sign * 0.31
            rects.append(axis_rect(c, axis, sign, (0.62, h), tex((0.62, h))))
    return SyntheticWorld(rects)


def single_wall(seed: int, distance: float = 3.07, half_width: float = 8.0,
                half_height: float = 3.0, texel: float = 0.02) -> SyntheticWorld:
    """One large textured wall facing -x at ``distance``."""
    size = (2 * half_width, 2 * half_height)
    return SyntheticWorld([axis_rect([distance, 0.0, 0.13], 0, -1, size,
                                     make_texture("noise", size, seed, 1, texel))])
