"""Run configuration: every tunable of the odometry loop, stored as ``key = value`` text."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .lidar import LidarNoiseModel
from .patches import GenerationConfig
from .state import NoiseConfig
from .visual import RaycastConfig, VisualConfig
from .voxelmap import VoxelMapConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # voxel map
    root_size: float = 0.5
    max_depth: int = 3
    plane_min_points: int = 10
    plane_thresh: float = 0.0025
    ratio_thresh: float = 0.1
    voxel_max_points: int = 200
    window_length: float = 100.0
    slide_distance: float = 20.0
    detection_radius: float = 30.0
    # LiDAR measurement
    lidar_range_sigma: float = 0.02
    lidar_bearing_sigma_deg: float = 0.05
    beam_divergence_deg: float = 0.15
    downsample_ratio: int = 3
    lidar_gate: float = 3.0
    # visual measurement
    patch_size: int = 8
    refine_patch_size: int = 11
    pyramid_levels: int = 3
    grid_cell: int = 30
    photometric_noise: float = 100.0
    depth_map_scale: int = 4
    occlusion_margin: float = 0.3
    discontinuity: float = 1.5
    max_view_angle_deg: float = 80.0
    jacobian_mode: str = "inverse"
    min_gradient: float = 5.0
    reattach_frames: int = 20
    reattach_pixels: float = 40.0
    raycast_d_min: float = 0.5
    raycast_d_max: float = 10.0
    raycast_samples: int = 40
    # filter
    lidar_max_iters: int = 5
    visual_max_iters: int = 3
    eps: float = 1e-3
    gravity_init_duration: float = 0.5
    gyro_noise_density: float = 2e-3
    accel_noise_density: float = 2e-2
    gyro_bias_walk: float = 2e-5
    accel_bias_walk: float = 5e-4
    exposure_walk: float = 0.3
    # feature toggles
    use_lidar: bool = True
    use_visual: bool = True
    exposure_estimation: bool = True
    normal_refinement: bool = False
    raycasting: bool = True
    threaded_refinement: bool = False

    def __post_init__(self):
        if self.root_size <= 0 or self.max_depth < 0:
            raise ConfigError("root_size must be positive and max_depth non-negative")
        if self.downsample_ratio < 1:
            raise ConfigError("downsample_ratio must be >= 1")
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if self.jacobian_mode not in ("inverse", "forward"):
            raise ConfigError("jacobian_mode must be 'inverse' or 'forward'")
        if not 0 < self.raycast_d_min < self.raycast_d_max:
            raise ConfigError("raycast requires 0 < raycast_d_min < raycast_d_max")

    # -- derived module configs ---------------------------------------------------------
    def voxel(self) -> VoxelMapConfig:
        return VoxelMapConfig(root_size=self.root_size, max_depth=self.max_depth,
                              min_points=self.plane_min_points, plane_thresh=self.plane_thresh,
                              ratio_thresh=self.ratio_thresh, max_points=self.voxel_max_points,
                              window_length=self.window_length, slide_distance=self.slide_distance,
                              detection_radius=self.detection_radius)

    def lidar_noise(self) -> LidarNoiseModel:
        return LidarNoiseModel(self.lidar_range_sigma, np.radians(self.lidar_bearing_sigma_deg),
                               np.radians(self.beam_divergence_deg))

    def visual(self) -> VisualConfig:
        return VisualConfig(patch_size=self.patch_size, levels=self.pyramid_levels,
                            grid_cell=self.grid_cell, photometric_noise=self.photometric_noise,
                            depth_map_scale=self.depth_map_scale,
                            occlusion_margin=self.occlusion_margin, discontinuity=self.discontinuity,
                            max_view_angle_deg=self.max_view_angle_deg,
                            jacobian_mode=self.jacobian_mode)

    def raycast(self) -> RaycastConfig | None:
        if not self.raycasting:
            return None
        return RaycastConfig(self.raycast_d_min, self.raycast_d_max, self.raycast_samples,
                             self.grid_cell)

    def generation(self) -> GenerationConfig:
        return GenerationConfig(grid_cell=self.grid_cell, patch_size=self.patch_size,
                                min_gradient=self.min_gradient,
                                max_view_angle_deg=self.max_view_angle_deg,
                                reattach_frames=self.reattach_frames,
                                reattach_pixels=self.reattach_pixels, border=self.visual().border)

    def imu_noise(self) -> NoiseConfig:
        return NoiseConfig(self.gyro_noise_density, self.accel_noise_density, self.gyro_bias_walk,
                           self.accel_bias_walk, self.exposure_walk)

    # -- text form ------------------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        items = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            items[key] = (value, f"{source}:{lineno}")
        return cls().with_overrides(items)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), str(p))

    def with_overrides(self, items) -> "RunConfig":
        """Copy with string-valued overrides; ``items`` maps key -> value or (value, where)."""
        types = {f.name: type(getattr(self, f.name)) for f in fields(self)}
        changes = {}
        for key, value in items.items():
            value, where = value if isinstance(value, tuple) else (value, "override")
            if key not in types:
                raise ConfigError(f"{where}: unknown config key {key!r}")
            changes[key] = _parse(value, types[key], f"{where}: {key}")
        try:
            return replace(self, **changes)
        except ConfigError as exc:
            raise ConfigError(f"{exc}") from None

    def as_dict(self) -> dict:
        return asdict(self)


def _parse(value: str, kind: type, where: str):
    text = str(value).strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {text!r}") from None
    return text


def parse_overrides(pairs) -> dict:
    """``["key=value", ...]`` from the command line into an override mapping."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = (v.strip(), "--set")
    return out
