"""Unified voxel map: hash table of root voxels, each an octree of plane leaves."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

_KEY_OFFSET = 1 << 20


@dataclass
class VoxelMapConfig:
    root_size: float = 0.5
    max_depth: int = 3
    min_points: int = 10
    plane_thresh: float = 0.0025
    ratio_thresh: float = 0.1
    mature_min_points: int = 30
    mature_angle_deg: float = 0.5
    mature_stable_updates: int = 2
    max_points: int = 200
    candidate_points: int = 50
    window_length: float = 100.0
    slide_distance: float = 20.0
    detection_radius: float = 30.0


@dataclass
class PlaneFeature:
    """Local plane: center q, unit normal n and the 6x6 covariance of (n, q)."""

    center: np.ndarray
    normal: np.ndarray
    param_cov: np.ndarray
    point_count: int
    eigenvalues: np.ndarray
    mature: bool = False

    def flipped(self) -> "PlaneFeature":
        C = self.param_cov.copy()
        C[:3, 3:] *= -1.0
        C[3:, :3] *= -1.0
        return PlaneFeature(self.center, -self.normal, C, self.point_count,
                            self.eigenvalues, self.mature)

    def signature(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.center, self.normal, self.param_cov))


def lattice(points: np.ndarray, size: float) -> np.ndarray:
    return np.floor(np.asarray(points) / size).astype(np.int64)


def encode(keys: np.ndarray) -> np.ndarray:
    k = keys + _KEY_OFFSET
    return (k[..., 0] << 42) | (k[..., 1] << 21) | k[..., 2]


def decode(codes: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode`."""
    c = np.asarray(codes, dtype=np.int64)
    mask = (1 << 21) - 1
    return np.stack([(c >> 42) & mask, (c >> 21) & mask, c & mask], axis=-1) - _KEY_OFFSET


def child_index(point: np.ndarray, depth: int, root_size: float) -> int:
    """Octant of ``point`` inside its depth-``depth`` voxel (lattice-consistent)."""
    size = root_size / (1 << depth)
    c = lattice(point, size / 2) - 2 * lattice(point, size)
    return int(c[0] * 4 + c[1] * 2 + c[2])


def _child_indices(points: np.ndarray, depth: int, root_size: float) -> np.ndarray:
    size = root_size / (1 << depth)
    c = lattice(points, size / 2) - 2 * lattice(points, size)
    return c[:, 0] * 4 + c[:, 1] * 2 + c[:, 2]


def fit_plane(points: np.ndarray, point_covs: np.ndarray | None = None,
              cfg: VoxelMapConfig | None = None, toward: np.ndarray | None = None
              ) -> PlaneFeature | None:
    """Least-squares plane through ``points`` or None if they are not planar.

    The normal is the scatter eigenvector of the smallest eigenvalue. The
    (n, q) covariance is propagated to first order from the per-point
    covariances through the eigenvector perturbation.
    """
    cfg = cfg or VoxelMapConfig()
    pts = np.asarray(points, dtype=float)
    N = len(pts)
    if N < 3:
        return None
    q = pts.mean(axis=0)
    D = pts - q
    scatter = D.T @ D / N
    evals, evecs = np.linalg.eigh(scatter)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        return None
    if not (evals[0] < cfg.plane_thresh and evals[0] < cfg.ratio_thresh * evals[1]):
        return None
    n = evecs[:, 0]
    if point_covs is None:
        C = np.zeros(6 * 6).reshape(6, 6)
    else:
        covs = np.asarray(point_covs, dtype=float).reshape(N, 3, 3)
        Jn = np.zeros((N, 3, 3))
        dn = D @ n
        for m in (1, 2):
            um = evecs[:, m]
            coef = 1.0 / (N * (evals[0] - evals[m]))
            row = dn[:, None] * um + (D @ um)[:, None] * n
            Jn += coef * um[None, :, None] * row[:, None, :]
        JnC = Jn @ covs
        C = np.empty((6, 6))
        C[:3, :3] = np.einsum("nab,ncb->ac", JnC, Jn)
        C[:3, 3:] = JnC.sum(axis=0) / N
        C[3:, :3] = C[:3, 3:].T
        C[3:, 3:] = covs.sum(axis=0) / (N * N)
    plane = PlaneFeature(q, n, C, N, evals)
    if toward is not None and np.dot(n, np.asarray(toward) - q) < 0:
        plane = plane.flipped()
    return plane


def fit_planes(point_sets, cov_sets=None, cfg: VoxelMapConfig | None = None, toward=None):
    """Batched :func:`fit_plane` over many voxels.

    Returns (planes, eigenvalues) where planes[i] is a PlaneFeature or None
    and eigenvalues (K, 3) holds each scatter spectrum (zeros below 3 points).
    ``toward`` is an optional per-set list of orientation targets.
    """
    cfg = cfg or VoxelMapConfig()
    K = len(point_sets)
    planes = [None] * K
    spectrum = np.zeros((K, 3))
    sizes = np.array([len(p) for p in point_sets], dtype=np.int64)
    idx = np.nonzero(sizes >= 3)[0]
    if len(idx) == 0:
        return planes, spectrum
    n_i = sizes[idx]
    P = np.vstack([point_sets[i] for i in idx])
    starts = np.r_[0, np.cumsum(n_i)[:-1]]
    seg = np.repeat(np.arange(len(idx)), n_i)
    q = np.add.reduceat(P, starts, axis=0) / n_i[:, None]
    D = P - q[seg]
    S = np.add.reduceat(D[:, :, None] * D[:, None, :], starts, axis=0) / n_i[:, None, None]
    evals, evecs = np.linalg.eigh(S)
    spectrum[idx] = evals
    planar = ((evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-300))
              & (evals[:, 0] < cfg.plane_thresh) & (evals[:, 0] < cfg.ratio_thresh * evals[:, 1]))
    if not planar.any():
        return planes, spectrum
    normals = evecs[:, :, 0]
    C = np.zeros((len(idx), 6, 6))
    if cov_sets is not None:
        covs = np.concatenate([np.asarray(cov_sets[i], dtype=float).reshape(-1, 3, 3)
                               for i in idx])
        ns = normals[seg]
        dn = np.einsum("ij,ij->i", D, ns)
        Jn = np.zeros((len(P), 3, 3))
        with np.errstate(divide="ignore", invalid="ignore"):
            for m in (1, 2):
                coef = np.where(planar, 1.0 / (n_i * (evals[:, 0] - evals[:, m])), 0.0)[seg]
                um = evecs[:, :, m][seg]
                row = dn[:, None] * um + np.einsum("ij,ij->i", D, um)[:, None] * ns
                Jn += coef[:, None, None] * um[:, :, None] * row[:, None, :]
        JnC = Jn @ covs
        C[:, :3, :3] = np.add.reduceat(np.einsum("nab,ncb->nac", JnC, Jn), starts, axis=0)
        C[:, :3, 3:] = np.add.reduceat(JnC, starts, axis=0) / n_i[:, None, None]
        C[:, 3:, :3] = np.transpose(C[:, :3, 3:], (0, 2, 1))
        C[:, 3:, 3:] = np.add.reduceat(covs, starts, axis=0) / (n_i * n_i)[:, None, None]
    for j in np.nonzero(planar)[0]:
        i = int(idx[j])
        plane = PlaneFeature(q[j], normals[j].copy(), C[j], int(n_i[j]), evals[j])
        target = None if toward is None else toward[i]
        if target is not None and np.dot(plane.normal, np.asarray(target) - plane.center) < 0:
            plane = plane.flipped()
        planes[i] = plane
    return planes, spectrum


class OctreeNode:
    """A voxel at some octree depth. Leaves may carry a plane and points.

    Visual map points are attached to root voxels only.
    """

    __slots__ = ("depth", "key", "points", "covs", "colors", "plane", "children",
                 "stable", "visual_points", "discarded", "updates")

    def __init__(self, depth: int, key: np.ndarray):
        self.depth = depth
        self.key = key
        self.points = np.zeros((0, 3))
        self.covs = np.zeros((0, 3, 3))
        self.colors = np.zeros(0)
        self.plane: PlaneFeature | None = None
        self.children: dict | None = None
        self.stable = 0
        self.visual_points: list = []
        self.discarded = 0
        self.updates = 0

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def center(self, root_size: float) -> np.ndarray:
        size = root_size / (1 << self.depth)
        return (self.key + 0.5) * size

    def leaves(self):
        if self.children is None:
            yield self
        else:
            for c in self.children.values():
                yield from c.leaves()

    def candidates(self) -> np.ndarray:
        """Points eligible to become visual landmarks (plane leaves only)."""
        return self.points if self.plane is not None else np.zeros((0, 3))


@dataclass
class LocalMapWindow:
    center: np.ndarray
    length: float
    slide: float
    radius: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        half = self.length / 2
        return np.all(np.abs(np.asarray(points) - self.center) <= half, axis=-1)


@dataclass
class PlaneIndex:
    """Flattened, sorted plane lookup per octree depth for vectorized queries."""

    codes: list
    slots: list
    normals: np.ndarray
    centers: np.ndarray
    covs: np.ndarray
    leaves: list


class VoxelMap:
    def __init__(self, cfg: VoxelMapConfig | None = None, origin=(0.0, 0.0, 0.0)):
        self.cfg = cfg or VoxelMapConfig()
        if self.cfg.detection_radius * 2 > self.cfg.window_length:
            raise ValueError("detection sphere does not fit inside the local map window")
        self.voxels: dict[tuple, OctreeNode] = {}
        self.window = LocalMapWindow(np.asarray(origin, dtype=float), self.cfg.window_length,
                                     self.cfg.slide_distance, self.cfg.detection_radius)
        self.dropped_outside = 0
        self.evicted = 0
        self._index: PlaneIndex | None = None
        self._pending: dict[tuple, list] = {}
        # plane leaves live in fixed slots of flat arrays so the index is cheap to rebuild
        self._slot_of: dict[tuple, int] = {}
        self._slot_leaves: list = []
        self._free_slots: list = []
        self._store = {"normal": np.zeros((0, 3)), "center": np.zeros((0, 3)),
                       "cov": np.zeros((0, 6, 6)), "code": np.zeros(0, np.int64),
                       "depth": np.zeros(0, np.int64), "live": np.zeros(0, bool)}

    # -- insertion and geometry -------------------------------------------------
    def insert_scan(self, points: np.ndarray, covs: np.ndarray | None = None,
                    colors: np.ndarray | None = None) -> list:
        """Distribute global points to root voxels; returns touched root keys."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = len(points)
        covs = np.zeros((n, 3, 3)) if covs is None else np.asarray(covs, dtype=float)
        colors = np.full(n, np.nan) if colors is None else np.asarray(colors, dtype=float)
        inside = self.window.contains(points)
        if (~inside).any():
            self.dropped_outside += int((~inside).sum())
        points, covs, colors = points[inside], covs[inside], colors[inside]
        if len(points) == 0:
            return []
        keys = lattice(points, self.cfg.root_size)
        order = np.argsort(encode(keys), kind="stable")
        points, covs, colors, keys = points[order], covs[order], colors[order], keys[order]
        starts = np.r_[0, np.nonzero(np.any(keys[1:] != keys[:-1], axis=1))[0] + 1]
        ends = np.r_[starts[1:], len(keys)]
        touched = []
        for a, b, key in zip(starts.tolist(), ends.tolist(), keys[starts].tolist()):
            key = tuple(key)
            if key not in self.voxels:
                self.voxels[key] = OctreeNode(0, np.array(key, dtype=np.int64))
            self._pending.setdefault(key, []).append((points[a:b], covs[a:b], colors[a:b]))
            touched.append(key)
        return touched

    def update_geometry(self, touched=None, sensor_position=None) -> None:
        """Refit the planes of voxels that received points since the last call.

        Leaves are processed level by level: every leaf needing a refit at the
        current level is fitted in one batch, and points of voxels that split
        are handed to their children for the next round.
        """
        cfg = self.cfg
        keys = list(self._pending) if touched is None else touched
        work = []
        for key in keys:
            chunks = self._pending.pop(key, None)
            node = self.voxels.get(key)
            if not chunks or node is None:
                continue
            if len(chunks) == 1:
                work.append((node, *chunks[0]))
            else:
                work.append((node, np.vstack([c[0] for c in chunks]),
                             np.concatenate([c[1] for c in chunks]),
                             np.concatenate([c[2] for c in chunks])))
        while work:
            refit, nxt = [], []
            for node, pts, covs, cols in work:
                if node.children is not None:
                    nxt.extend(self._split(node, pts, covs, cols))
                    continue
                if node.plane is not None and node.plane.mature:
                    # frozen: keeps the points it had when it matured
                    continue
                node.points = np.vstack([node.points, pts])
                node.covs = np.concatenate([node.covs, covs])
                node.colors = np.concatenate([node.colors, cols])
                if len(node.points) >= cfg.min_points:
                    refit.append(node)
            if refit:
                toward = [sensor_position if n.plane is None else None for n in refit]
                planes, evals = fit_planes([n.points for n in refit], [n.covs for n in refit],
                                           cfg, toward)
                for node, plane, ev in zip(refit, planes, evals):
                    if node.plane is None and ev[1] < cfg.plane_thresh:
                        # points along a single scan line say nothing about planarity yet
                        continue
                    nxt.extend(self._apply_fit(node, plane))
                    self._index = None
            work = nxt

    @staticmethod
    def _trim(node: OctreeNode, keep: int) -> None:
        if len(node.points) > keep:
            node.points = node.points[-keep:]
            node.covs = node.covs[-keep:]
            node.colors = node.colors[-keep:]

    def _apply_fit(self, node: OctreeNode, plane: PlaneFeature | None) -> list:
        cfg = self.cfg
        old = node.plane
        slot = (node.depth, tuple(int(v) for v in node.key))
        if plane is None:
            node.plane = None
            self._drop_plane(slot)
            node.stable = 0
            pts, covs, cols = node.points, node.covs, node.colors
            node.points = np.zeros((0, 3))
            node.covs = np.zeros((0, 3, 3))
            node.colors = np.zeros(0)
            if node.depth < cfg.max_depth:
                node.children = {}
                return self._split(node, pts, covs, cols)
            node.discarded += len(pts)
            return []
        node.updates += 1
        if old is not None:
            if np.dot(plane.normal, old.normal) < 0:
                plane = plane.flipped()
            cosang = np.clip(np.dot(plane.normal, old.normal), -1.0, 1.0)
            if np.degrees(np.arccos(cosang)) < cfg.mature_angle_deg:
                node.stable += 1
            else:
                node.stable = 0
        node.plane = plane
        self._store_plane(slot, node)
        if node.stable >= cfg.mature_stable_updates and plane.point_count >= cfg.mature_min_points:
            plane.mature = True
            self._trim(node, cfg.candidate_points)
        else:
            self._trim(node, cfg.max_points)
        return []

    def _split(self, node: OctreeNode, pts, covs, cols) -> list:
        """Partition points among the children of ``node`` as work items."""
        idx = _child_indices(pts, node.depth, self.cfg.root_size)
        order = np.argsort(idx, kind="stable")
        counts = np.bincount(idx, minlength=8)
        ends = np.cumsum(counts)
        size = self.cfg.root_size / (1 << (node.depth + 1))
        out = []
        for c in np.nonzero(counts)[0].tolist():
            sel = order[ends[c] - counts[c]:ends[c]]
            child = node.children.get(c)
            if child is None:
                child = OctreeNode(node.depth + 1, lattice(pts[sel[0]], size))
                node.children[c] = child
            out.append((child, pts[sel], covs[sel], cols[sel]))
        return out

    # -- queries ------------------------------------------------------------------
    def root(self, point: np.ndarray) -> OctreeNode | None:
        return self.voxels.get(tuple(int(v) for v in lattice(point, self.cfg.root_size)))

    def query_voxel(self, point: np.ndarray):
        """Deepest voxel on the octree path of ``point`` holding a plane, or None."""
        point = np.asarray(point, dtype=float)
        node = self.root(point)
        while node is not None:
            if node.plane is not None:
                return node, node.plane
            if node.children is None:
                return None
            node = node.children.get(child_index(point, node.depth, self.cfg.root_size))
        return None

    def plane_index(self) -> PlaneIndex:
        if self._index is None:
            self._index = self._build_index()
        return self._index

    def _store_plane(self, slot_key: tuple, node: OctreeNode) -> None:
        st = self._store
        i = self._slot_of.get(slot_key)
        if i is None:
            if self._free_slots:
                i = self._free_slots.pop()
            else:
                i = len(self._slot_leaves)
                self._slot_leaves.append(None)
                if i >= len(st["live"]):
                    grow = max(64, len(st["live"]))
                    for name, arr in st.items():
                        st[name] = np.concatenate([arr, np.zeros((grow,) + arr.shape[1:],
                                                                 arr.dtype)])
            self._slot_of[slot_key] = i
            st["code"][i] = encode(np.asarray(node.key, dtype=np.int64))
            st["depth"][i] = node.depth
            st["live"][i] = True
        self._slot_leaves[i] = node
        st["normal"][i] = node.plane.normal
        st["center"][i] = node.plane.center
        st["cov"][i] = node.plane.param_cov

    def _drop_plane(self, slot_key: tuple) -> None:
        i = self._slot_of.pop(slot_key, None)
        if i is None:
            return
        self._store["live"][i] = False
        self._slot_leaves[i] = None
        self._free_slots.append(i)

    def _build_index(self) -> PlaneIndex:
        st = self._store
        n = len(self._slot_leaves)
        live, depth, codes = st["live"][:n], st["depth"][:n], st["code"][:n]
        code_arrays, slot_arrays = [], []
        for d in range(self.cfg.max_depth + 1):
            slots = np.nonzero(live & (depth == d))[0]
            order = np.argsort(codes[slots])
            code_arrays.append(codes[slots][order])
            slot_arrays.append(slots[order])
        return PlaneIndex(code_arrays, slot_arrays, st["normal"][:n].copy(),
                          st["center"][:n].copy(), st["cov"][:n].copy(), list(self._slot_leaves))

    def query_planes(self, points: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`query_voxel`: plane slot per point in the index, -1 if none."""
        index = self.plane_index()
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        out = np.full(len(points), -1, dtype=np.int64)
        for depth, (codes, slots) in enumerate(zip(index.codes, index.slots)):
            if len(codes) == 0:
                continue
            size = self.cfg.root_size / (1 << depth)
            c = encode(lattice(points, size))
            pos = np.clip(np.searchsorted(codes, c), 0, len(codes) - 1)
            hit = (codes[pos] == c) & (out < 0)
            out[hit] = slots[pos[hit]]
        return out

    # -- window -------------------------------------------------------------------
    def slide_window(self, lidar_position: np.ndarray) -> bool:
        """Recenter the local map if the detection sphere touches its boundary."""
        w = self.window
        pos = np.asarray(lidar_position, dtype=float)
        half = w.length / 2
        moved = False
        for a in range(3):
            while pos[a] + w.radius > w.center[a] + half:
                w.center[a] += w.slide
                moved = True
            while pos[a] - w.radius < w.center[a] - half:
                w.center[a] -= w.slide
                moved = True
        if moved:
            keys = list(self.voxels)
            centers = (np.array(keys, dtype=float) + 0.5) * self.cfg.root_size
            outside = ~w.contains(centers)
            for key, out in zip(keys, outside):
                if out:
                    for leaf in self.voxels[key].leaves():
                        self._drop_plane((leaf.depth, tuple(int(v) for v in leaf.key)))
                    del self.voxels[key]
                    self._pending.pop(key, None)
                    self.evicted += 1
            self._index = None
        return moved

    # -- bookkeeping ----------------------------------------------------------------
    def leaves(self):
        for root in self.voxels.values():
            yield from root.leaves()

    def all_points(self):
        pts, cols = [], []
        for leaf in self.leaves():
            pts.append(leaf.points)
            cols.append(leaf.colors)
        if not pts:
            return np.zeros((0, 3)), np.zeros(0)
        return np.vstack(pts), np.concatenate(cols)

    def add_visual_point(self, vp) -> None:
        key = tuple(int(v) for v in lattice(vp.position, self.cfg.root_size))
        root = self.voxels.get(key)
        if root is None:
            return
        vp.voxel_key = key
        root.visual_points.append(vp)

    def visual_points_in(self, keys):
        out = []
        for key in keys:
            root = self.voxels.get(key)
            if root is not None:
                out.extend(root.visual_points)
        return out

    def visual_keys(self) -> np.ndarray:
        """Root keys currently holding visual points, shape (K, 3)."""
        keys = [k for k, r in self.voxels.items() if r.visual_points]
        return np.array(keys, dtype=np.int64).reshape(-1, 3)

    def paint(self, keys, color_fn) -> None:
        """Fill unset point colors in the given root voxels with ``color_fn(points)``."""
        for key in keys:
            root = self.voxels.get(key)
            if root is None:
                continue
            for leaf in root.leaves():
                unset = np.isnan(leaf.colors)
                if unset.any():
                    leaf.colors[unset] = color_fn(leaf.points[unset])

    def summary(self) -> dict:
        planes = [leaf.plane for leaf in self.leaves() if leaf.plane is not None]
        mature = sum(p.mature for p in planes)
        return {
            "root_voxels": len(self.voxels),
            "leaves": sum(1 for _ in self.leaves()),
            "planes": len(planes),
            "mature_fraction": mature / len(planes) if planes else 0.0,
            "points": int(sum(len(leaf.points) for leaf in self.leaves())),
            "visual_points": int(sum(len(r.visual_points) for r in self.voxels.values())),
        }
