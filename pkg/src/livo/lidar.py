"""Point-to-plane residuals with beam-divergence-aware noise for the LiDAR update."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import so3
from .esikf import MeasurementBatch
from .state import DIM, Extrinsics, NavState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LidarNoiseModel:
    range_sigma: float = 0.02
    bearing_sigma: float = np.radians(0.05)
    beam_divergence: float = np.radians(0.15)

    def __post_init__(self):
        if min(self.range_sigma, self.bearing_sigma, self.beam_divergence) < 0:
            raise ValueError("LiDAR noise parameters must be non-negative")


@dataclass
class PointToPlaneResidual:
    residual: float
    jacobian: np.ndarray
    variance: float


def transform_to_global(points: np.ndarray, state: NavState, ext: Extrinsics | None = None):
    """Map LiDAR-frame points through the extrinsic and the body pose."""
    p = np.asarray(points, dtype=float)
    if ext is not None:
        p = p @ ext.R_il.T + ext.t_il
    return p @ state.rotation.T + state.position


def divergence_term(d, phi, theta):
    """Range spread of a diverging beam hitting a surface at incidence ``phi``.

    Evaluates d*(cos(phi)/cos(theta+phi) - cos(phi)/cos(theta-phi)) in the
    cancellation-free product form.
    """
    d, phi = np.asarray(d, dtype=float), np.asarray(phi, dtype=float)
    num = 2.0 * d * np.sin(theta) * np.sin(phi) * np.cos(phi)
    return np.abs(num / (np.cos(theta + phi) * np.cos(theta - phi)))


def divergence_range_sigma(d, phi, model: LidarNoiseModel):
    """Range standard deviation: base sensor noise and beam divergence combined RSS."""
    theta = model.beam_divergence
    phi = np.asarray(phi, dtype=float)
    edge = np.pi / 2 - theta - 1e-6
    if np.any((phi < 0) | (phi > edge)):
        log.warning("incidence angle outside [0, pi/2 - theta); saturating")
        phi = np.clip(phi, 0.0, edge)
    return np.hypot(model.range_sigma, divergence_term(d, phi, theta))


def sensor_covariance(points: np.ndarray, model: LidarNoiseModel, range_sigma=None):
    """Per-point 3x3 LiDAR-frame covariance.

    Range noise is treated as isotropic (an upper bound on its along-beam
    effect); bearing noise acts perpendicular to the beam scaled by range.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    d = np.linalg.norm(p, axis=1)
    b = p / np.maximum(d, 1e-9)[:, None]
    sr = model.range_sigma if range_sigma is None else np.asarray(range_sigma)
    sr2 = np.broadcast_to(np.asarray(sr, dtype=float) ** 2, d.shape)
    sb2 = (d * model.bearing_sigma) ** 2
    eye = np.eye(3)[None]
    perp = eye - b[:, :, None] * b[:, None, :]
    return sr2[:, None, None] * eye + sb2[:, None, None] * perp


def point_to_plane(points_imu, state: NavState, normals, centers):
    """Residuals n^T(R p + t - q) and their 19-column Jacobian rows."""
    R = state.rotation
    world = points_imu @ R.T + state.position
    r = np.einsum("ij,ij->i", normals, world - centers)
    J = np.zeros((len(r), DIM))
    nR = normals @ R
    J[:, 0:3] = -np.einsum("ni,nij->nj", nR, so3.skew_batch(points_imu))
    J[:, 3:6] = normals
    return r, J, world


def lumped_variance(points_lidar, world, normals, centers, plane_covs, state: NavState,
                    ext: Extrinsics | None, model: LidarNoiseModel):
    """Variance of each residual from point noise and plane parameter noise."""
    d = np.linalg.norm(points_lidar, axis=1)
    R_gl = state.rotation if ext is None else state.rotation @ ext.R_il
    beams = (points_lidar / np.maximum(d, 1e-9)[:, None]) @ R_gl.T
    cosphi = np.clip(np.abs(np.einsum("ij,ij->i", beams, normals)), 0.0, 1.0)
    phi = np.arccos(cosphi)
    edge = np.pi / 2 - model.beam_divergence - 1e-6
    sr = np.hypot(model.range_sigma,
                  divergence_term(d, np.minimum(phi, edge), model.beam_divergence))
    var = sr**2 + (d * model.bearing_sigma) ** 2 * (1.0 - cosphi**2)
    Jnq = np.concatenate([world - centers, -normals], axis=1)
    var = var + np.einsum("ni,nij,nj->n", Jnq, plane_covs, Jnq)
    return var


def temporal_downsample(n_points: int, ratio: int = 3) -> np.ndarray:
    """Indices keeping every ``ratio``-th point of a time-ordered scan."""
    return np.arange(0, n_points, max(int(ratio), 1))


class LidarMeasurement:
    """Measurement provider for the LiDAR stage of the iterated update.

    Points are undistorted LiDAR-frame coordinates at the scan end. Plane
    association is redone at every iterate; residuals beyond ``gate`` sigma
    (with pose uncertainty folded in) are skipped for that iterate.
    """

    def __init__(self, points, voxel_map, ext: Extrinsics | None = None,
                 model: LidarNoiseModel | None = None, prior_cov=None, gate: float = 3.0):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.map = voxel_map
        self.ext = ext
        self.model = model or LidarNoiseModel()
        self.prior_cov = None if prior_cov is None else np.asarray(prior_cov)[:6, :6]
        self.gate = gate
        if ext is not None:
            self.points_imu = self.points @ ext.R_il.T + ext.t_il
        else:
            self.points_imu = self.points
        self.last_matched = 0

    def __call__(self, state: NavState) -> MeasurementBatch:
        world_all = self.points_imu @ state.rotation.T + state.position
        slots = self.map.query_planes(world_all)
        hit = slots >= 0
        if not hit.any():
            self.last_matched = 0
            return MeasurementBatch.empty()
        index = self.map.plane_index()
        s = slots[hit]
        normals, centers, covs = index.normals[s], index.centers[s], index.covs[s]
        r, J, world = point_to_plane(self.points_imu[hit], state, normals, centers)
        var = lumped_variance(self.points[hit], world, normals, centers, covs,
                              state, self.ext, self.model)
        gate_var = var
        if self.prior_cov is not None:
            Jp = J[:, :6]
            gate_var = var + np.einsum("ni,ij,nj->n", Jp, self.prior_cov, Jp)
        ok = r * r <= self.gate**2 * gate_var
        self.last_matched = int(ok.sum())
        return MeasurementBatch(r[ok], J[ok], var[ok])


def build_residual(point, state: NavState, voxel_map, ext: Extrinsics | None = None,
                   model: LidarNoiseModel | None = None) -> PointToPlaneResidual | None:
    """Single-point residual; None when no plane holds the transformed point."""
    model = model or LidarNoiseModel()
    p = np.asarray(point, dtype=float).reshape(1, 3)
    p_imu = p if ext is None else p @ ext.R_il.T + ext.t_il
    world = p_imu @ state.rotation.T + state.position
    found = voxel_map.query_voxel(world[0])
    if found is None:
        return None
    plane = found[1]
    n, q = plane.normal[None], plane.center[None]
    r, J, world = point_to_plane(p_imu, state, n, q)
    var = lumped_variance(p, world, n, q, plane.param_cov[None], state, ext, model)
    return PointToPlaneResidual(float(r[0]), J[0], float(var[0]))
