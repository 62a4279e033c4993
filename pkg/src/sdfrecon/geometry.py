"""Spatial primitives: rays, boxes, the sparse voxel envelope and the cache octree.

Points and directions are plain ``numpy`` arrays of shape ``(3,)`` or ``(N, 3)``.
Every ray query has a batched form operating on ``(N, 3)`` origin/direction
arrays; the single-ray helpers wrap those so there is one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_DIR_TOL = 1e-9


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise ValueError("ray components must be finite")
        if abs(np.linalg.norm(d) - 1.0) > _DIR_TOL:
            raise ValueError(f"ray direction must be unit length, got |d|={np.linalg.norm(d)!r}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @classmethod
    def towards(cls, origin, direction) -> "Ray":
        d = np.asarray(direction, dtype=np.float64)
        return cls(origin, d / np.linalg.norm(d))

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError("Aabb requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


def ray_aabb_batch(origins, dirs, lo, hi):
    """Slab test for many rays against one box (or one box per ray).

    Returns ``(t_in, t_out, hit)``. ``t_in`` is not clamped to zero; a hit
    requires ``t_out >= max(t_in, 0)``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # zero direction component: inside the slab -> unbounded, outside -> empty
    par = dirs == 0.0
    if np.any(par):
        inside = (origins >= lo) & (origins <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t_in = tmin.max(axis=-1)
    t_out = tmax.min(axis=-1)
    hit = (t_out >= np.maximum(t_in, 0.0)) & np.isfinite(t_in) & np.isfinite(t_out)
    return t_in, t_out, hit


def ray_aabb_intersect(ray: Ray, box: Aabb):
    """Entry/exit parameters of ``ray`` with ``box``, or ``None`` on a miss."""
    t_in, t_out, hit = ray_aabb_batch(ray.origin[None], ray.direction[None], box.lo, box.hi)
    if not hit[0]:
        return None
    return float(t_in[0]), float(t_out[0])


@dataclass
class SparseVoxelGrid:
    """Occupancy set over an axis-aligned lattice with cells ``[lo, lo + s)``."""

    origin: np.ndarray
    voxel_size: float
    keys: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        self.keys = np.unique(keys, axis=0) if len(keys) else keys
        self._dense = None

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def occupied(self) -> set[tuple[int, int, int]]:
        return {tuple(int(c) for c in k) for k in self.keys}

    def key_of(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - self.origin) / self.voxel_size).astype(np.int64)

    def cell_lo(self, keys) -> np.ndarray:
        return self.origin + np.asarray(keys, dtype=np.float64) * self.voxel_size

    def cell_center(self, keys) -> np.ndarray:
        return self.cell_lo(keys) + 0.5 * self.voxel_size

    def key_bounds(self):
        """Inclusive min and max occupied key; raises on an empty grid."""
        if len(self.keys) == 0:
            raise ValueError("empty voxel grid")
        return self.keys.min(axis=0), self.keys.max(axis=0)

    def bounds(self) -> Aabb:
        kmin, kmax = self.key_bounds()
        return Aabb(self.cell_lo(kmin), self.cell_lo(kmax + 1))

    def dense(self):
        """``(kmin, occupancy)`` with occupancy a bool array over the key bounding box."""
        if self._dense is None:
            kmin, kmax = self.key_bounds()
            occ = np.zeros(tuple(kmax - kmin + 1), dtype=bool)
            rel = self.keys - kmin
            occ[rel[:, 0], rel[:, 1], rel[:, 2]] = True
            self._dense = (kmin, occ)
        return self._dense

    def contains_keys(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.zeros(keys.shape[:-1], dtype=bool)
        kmin, occ = self.dense()
        rel = keys - kmin
        ok = np.all((rel >= 0) & (rel < occ.shape), axis=-1)
        out = np.zeros(keys.shape[:-1], dtype=bool)
        r = rel[ok]
        out[ok] = occ[r[..., 0], r[..., 1], r[..., 2]]
        return out

    def contains(self, points) -> np.ndarray:
        return self.contains_keys(self.key_of(points))

    def center_and_extent(self):
        """Center and half of the longest edge of the occupied bounding box."""
        b = self.bounds()
        return 0.5 * (b.lo + b.hi), 0.5 * float(np.max(b.hi - b.lo))


def voxelize_points(points, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> SparseVoxelGrid:
    grid = SparseVoxelGrid(np.asarray(origin, dtype=np.float64), float(voxel_size))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        grid = SparseVoxelGrid(grid.origin, grid.voxel_size, grid.key_of(pts))
    return grid


def dilate(grid: SparseVoxelGrid, radius: int = 1) -> SparseVoxelGrid:
    """Grow the occupied set by a ``(2r+1)^3`` cube around every key."""
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    if radius == 0 or len(grid.keys) == 0:
        return SparseVoxelGrid(grid.origin, grid.voxel_size, grid.keys.copy())
    r = np.arange(-radius, radius + 1)
    offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    keys = (grid.keys[:, None, :] + offs[None]).reshape(-1, 3)
    return SparseVoxelGrid(grid.origin, grid.voxel_size, keys)


def traverse_lattice(origins, dirs, t0, t1, lo, cell, shape):
    """Ordered cells visited by each ray of a batch inside ``[t0, t1]``.

    The lattice has cells of edge ``cell`` starting at ``lo`` and ``shape``
    cells per axis. Crossings with every lattice plane inside the clip
    interval are enumerated and sorted, which visits exactly the cells a
    3D-DDA walk would. Returns ``(t_enter, t_exit, ijk, valid)`` with shapes
    ``(R, M)``, ``(R, M)``, ``(R, M, 3)``, ``(R, M)``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = len(origins)
    shape = np.asarray(shape, dtype=np.int64)
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    live = t1 > t0
    t0c = np.where(live, t0, 0.0)
    t1c = np.where(live, t1, 0.0)
    cols = [t0c[:, None], t1c[:, None]]
    for a in range(3):
        d = dirs[:, a]
        pa = (origins[:, a] + np.minimum(t0c * d, t1c * d) - lo[a]) / cell
        pb = (origins[:, a] + np.maximum(t0c * d, t1c * d) - lo[a]) / cell
        k0 = np.clip(np.floor(pa).astype(np.int64) + 1, 0, shape[a])
        k1 = np.clip(np.ceil(pb).astype(np.int64) - 1, 0, shape[a])
        cnt = np.where(live & (d != 0), np.maximum(k1 - k0 + 1, 0), 0)
        m = int(cnt.max()) if R else 0
        if m == 0:
            continue
        ks = k0[:, None] + np.arange(m)[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            tk = (lo[a] + ks * cell - origins[:, a, None]) / d[:, None]
        ok = (np.arange(m)[None] < cnt[:, None]) & (tk > t0c[:, None]) & (tk < t1c[:, None])
        cols.append(np.where(ok, tk, np.inf))
    ts = np.sort(np.concatenate(cols, axis=1), axis=1)
    ta, tb = ts[:, :-1], ts[:, 1:]
    valid = np.isfinite(tb) & (tb > ta) & live[:, None]
    with np.errstate(invalid="ignore"):
        tm = np.where(valid, 0.5 * (ta + tb), 0.0)
    pts = origins[:, None, :] + tm[..., None] * dirs[:, None, :]
    ijk = np.floor((pts - lo) / cell).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < shape), axis=-1)
    valid &= inside
    return ta, tb, ijk, valid


def ray_grid_intersect_batch(origins, dirs, grid: SparseVoxelGrid, chunk: int = 16384):
    """First-entry / last-exit parameters over occupied voxels for many rays.

    Returns ``(t_in, t_out, hit)``; ``t_in`` is clamped to be non-negative.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = len(origins)
    t_in = np.zeros(R)
    t_out = np.zeros(R)
    hit = np.zeros(R, dtype=bool)
    if len(grid.keys) == 0 or R == 0:
        return t_in, t_out, hit
    kmin, occ = grid.dense()
    lo = grid.cell_lo(kmin)
    hi = lo + np.asarray(occ.shape) * grid.voxel_size
    for s in range(0, R, chunk):
        o, d = origins[s:s + chunk], dirs[s:s + chunk]
        a, b, h = ray_aabb_batch(o, d, lo, hi)
        a = np.maximum(a, 0.0)
        ta, tb, ijk, valid = traverse_lattice(o, d, a, np.where(h, b, a), lo, grid.voxel_size, occ.shape)
        ijk = np.clip(ijk, 0, np.asarray(occ.shape) - 1)
        filled = valid & occ[ijk[..., 0], ijk[..., 1], ijk[..., 2]]
        any_ = filled.any(axis=1)
        first = np.argmax(filled, axis=1)
        last = filled.shape[1] - 1 - np.argmax(filled[:, ::-1], axis=1)
        rows = np.arange(len(o))
        t_in[s:s + chunk] = np.where(any_, ta[rows, first], 0.0)
        t_out[s:s + chunk] = np.where(any_, tb[rows, last], 0.0)
        hit[s:s + chunk] = any_
    return t_in, t_out, hit


def ray_grid_intersect(ray: Ray, grid: SparseVoxelGrid):
    t_in, t_out, hit = ray_grid_intersect_batch(ray.origin[None], ray.direction[None], grid)
    if not hit[0]:
        return None
    return float(t_in[0]), float(t_out[0])


class Octree:
    """Pointer-free octree over a sparse voxel grid.

    Internal nodes are kept per level as key sets so a point query descends
    level by level. Leaves at depth ``ell`` carry an SDF payload (``nan`` when
    unset) and the iteration at which it was written (``-1`` when unset).
    """

    def __init__(self, lo, edge_exp: int, voxel_size: float, depth: int, leaf_keys):
        if depth < 1:
            raise ValueError("octree depth must be >= 1")
        self.lo = np.asarray(lo, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.edge_exp = int(edge_exp)
        self.depth = int(depth)
        self.n = 1 << self.depth
        # root edge = s * 2^edge_exp, leaf edge = s * 2^(edge_exp - depth); both exact
        self.edge = math.ldexp(self.voxel_size, self.edge_exp)
        self.leaf_edge = math.ldexp(self.voxel_size, self.edge_exp - self.depth)
        keys = np.unique(np.asarray(leaf_keys, dtype=np.int64).reshape(-1, 3), axis=0)
        ids = self._linear(keys)
        order = np.argsort(ids)
        self.leaf_keys = keys[order]
        self.leaf_ids = ids[order]
        self.sdf = np.full(len(keys), np.nan)
        self.stamp = np.full(len(keys), -1, dtype=np.int64)
        self._index = {tuple(int(c) for c in k): i for i, k in enumerate(self.leaf_keys)}
        self.levels: list[set] = []
        for lvl in range(self.depth + 1):
            shift = self.depth - lvl
            self.levels.append({tuple(int(c) for c in k) for k in np.unique(self.leaf_keys >> shift, axis=0)})

    def __len__(self) -> int:
        return len(self.leaf_keys)

    @property
    def bounds(self) -> Aabb:
        return Aabb(self.lo, self.lo + self.edge)

    def _linear(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        return (keys[..., 0] * self.n + keys[..., 1]) * self.n + keys[..., 2]

    def leaf_centers(self, idx=None) -> np.ndarray:
        keys = self.leaf_keys if idx is None else self.leaf_keys[idx]
        return self.lo + (keys + 0.5) * self.leaf_edge

    def leaf_index(self, keys) -> np.ndarray:
        """Vectorised key -> leaf index lookup; ``-1`` where not materialized."""
        keys = np.asarray(keys, dtype=np.int64)
        inside = np.all((keys >= 0) & (keys < self.n), axis=-1)
        ids = np.where(inside, self._linear(np.clip(keys, 0, self.n - 1)), -1)
        pos = np.clip(np.searchsorted(self.leaf_ids, ids), 0, max(len(self.leaf_ids) - 1, 0))
        found = inside & (self.leaf_ids[pos] == ids) if len(self.leaf_ids) else np.zeros_like(inside)
        return np.where(found, pos, -1)

    def leaf_at(self, p):
        """Index of the materialized leaf containing ``p`` or ``None`` (O(depth) descent)."""
        rel = (np.asarray(p, dtype=np.float64).reshape(3) - self.lo) / self.leaf_edge
        if np.any(rel < 0) or np.any(rel >= self.n):
            return None
        key = np.floor(rel).astype(np.int64)
        for lvl in range(self.depth + 1):
            node = tuple(int(c) for c in key >> (self.depth - lvl))
            if node not in self.levels[lvl]:
                return None
        return self._index[tuple(int(c) for c in key)]


def build_octree(grid: SparseVoxelGrid, depth: int) -> Octree:
    """Octree whose root is the power-of-two voxel cube covering ``grid``."""
    if len(grid.keys) == 0:
        raise ValueError("cannot build an octree over an empty voxel grid: scene has no usable SfM points")
    if depth < 1:
        raise ValueError("octree depth must be >= 1")
    kmin, kmax = grid.key_bounds()
    span = int(np.max(kmax - kmin + 1))
    edge_exp = max(0, math.ceil(math.log2(span)))
    while (1 << edge_exp) < span:
        edge_exp += 1
    rel = grid.keys - kmin
    if depth >= edge_exp:
        per = 1 << (depth - edge_exp)
        r = np.arange(per)
        offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        leaf_keys = (rel[:, None, :] * per + offs[None]).reshape(-1, 3)
    else:
        leaf_keys = rel >> (edge_exp - depth)
    return Octree(grid.cell_lo(kmin), edge_exp, grid.voxel_size, depth, leaf_keys)


def octree_leaf_at(tree: Octree, p):
    return tree.leaf_at(p)
