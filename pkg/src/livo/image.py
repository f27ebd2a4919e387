"""Grayscale image pyramids, bilinear sampling, pinhole camera and raster I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


def to_level(uv: np.ndarray, level: int) -> np.ndarray:
    """Level-0 pixel coordinates to level coordinates (pixel centers at integers)."""
    s = float(1 << level)
    return (np.asarray(uv, dtype=float) + 0.5) / s - 0.5


def from_level(uv: np.ndarray, level: int) -> np.ndarray:
    s = float(1 << level)
    return (np.asarray(uv, dtype=float) + 0.5) * s - 0.5


def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``img`` at float (x=column, y=row); returns (values, inside mask)."""
    h, w = img.shape
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = (x >= 0) & (y >= 0) & (x <= w - 1) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 2) if w > 1 else np.zeros_like(xc, int)
    y0 = np.minimum(np.floor(yc).astype(np.int64), h - 2) if h > 1 else np.zeros_like(yc, int)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, inside


def bilinear_stack(stack: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample image ``k`` of ``stack`` (N, H, W) at x[k], y[k] (each (N, M)), clamped to the edges."""
    n, h, w = stack.shape
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.int64), h - 2)
    fx = xc - x0
    fy = yc - y0
    flat = stack.reshape(-1)
    i00 = (np.arange(n) * (h * w)).reshape((n,) + (1,) * (x.ndim - 1)) + y0 * w + x0
    top = flat[i00] * (1 - fx) + flat[i00 + 1] * fx
    bot = flat[i00 + w] * (1 - fx) + flat[i00 + w + 1] * fx
    return top * (1 - fy) + bot * fy


def downsample(img: np.ndarray) -> np.ndarray:
    """2x2 box average (odd trailing row/column dropped)."""
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    a = img[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


class ImagePyramid:
    """Levels of a grayscale image; coordinates passed in are level-0 pixels."""

    def __init__(self, image: np.ndarray, levels: int = 3):
        base = np.asarray(image, dtype=float)
        self.levels = [base]
        for _ in range(levels - 1):
            self.levels.append(downsample(self.levels[-1]))

    @property
    def shape(self):
        return self.levels[0].shape

    def sample(self, level: int, uv: np.ndarray):
        uv = np.asarray(uv, dtype=float)
        q = to_level(uv, level)
        return bilinear(self.levels[level], q[..., 0], q[..., 1])

    def gradient(self, level: int, uv: np.ndarray) -> np.ndarray:
        """Central-difference gradient at ``level`` w.r.t. level-0 pixel coordinates."""
        uv = np.asarray(uv, dtype=float)
        q = to_level(uv, level)
        img = self.levels[level]
        gx = 0.5 * (bilinear(img, q[..., 0] + 1, q[..., 1])[0]
                    - bilinear(img, q[..., 0] - 1, q[..., 1])[0])
        gy = 0.5 * (bilinear(img, q[..., 0], q[..., 1] + 1)[0]
                    - bilinear(img, q[..., 0], q[..., 1] - 1)[0])
        return np.stack([gx, gy], axis=-1) / float(1 << level)


def pixel_gradient_magnitude(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude at the nearest integer pixels."""
    h, w = img.shape
    x = np.clip(np.rint(uv[:, 0]).astype(int), 1, w - 2)
    y = np.clip(np.rint(uv[:, 1]).astype(int), 1, h - 2)
    gx = 0.5 * (img[y, x + 1] - img[y, x - 1])
    gy = 0.5 * (img[y + 1, x] - img[y - 1, x])
    return np.hypot(gx, gy)


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def project(self, pc: np.ndarray) -> np.ndarray:
        pc = np.asarray(pc, dtype=float)
        z = pc[..., 2]
        return np.stack([self.fx * pc[..., 0] / z + self.cx,
                         self.fy * pc[..., 1] / z + self.cy], axis=-1)

    def project_jacobian(self, pc: np.ndarray) -> np.ndarray:
        """d(pixel)/d(camera point), shape (N, 2, 3)."""
        pc = np.asarray(pc, dtype=float).reshape(-1, 3)
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        J = np.zeros((len(pc), 2, 3))
        J[:, 0, 0] = self.fx / z
        J[:, 0, 2] = -self.fx * x / (z * z)
        J[:, 1, 1] = self.fy / z
        J[:, 1, 2] = -self.fy * y / (z * z)
        return J

    def ray(self, uv: np.ndarray) -> np.ndarray:
        """Camera-frame direction with unit z through pixel ``uv``."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy,
                         np.ones(uv.shape[:-1])], axis=-1)

    def in_image(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        return ((uv[..., 0] >= margin) & (uv[..., 1] >= margin)
                & (uv[..., 0] <= self.width - 1 - margin) & (uv[..., 1] <= self.height - 1 - margin))


def read_gray(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image file: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            im = im.convert("L")
        return np.asarray(im)


def write_gray(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=float)), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_rgb(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=float)), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def world_to_camera(state, ext=None):
    """Camera-from-world rotation and translation for a body state."""
    if ext is None:
        R_ci, t_ci = np.eye(3), np.zeros(3)
    else:
        R_ci, t_ci = ext.R_ci, ext.t_ci
    R_cw = R_ci @ state.rotation.T
    return R_cw, t_ci - R_cw @ state.position
