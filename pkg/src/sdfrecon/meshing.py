"""Zero-level-set extraction restricted to the sparse voxel envelope, and surface point sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .geometry import SparseVoxelGrid
from .ply import load_ply, save_ply

log = logging.getLogger(__name__)

MIN_AREA = 1e-12


@dataclass
class TriMesh:
    vertices: np.ndarray               # (V, 3)
    triangles: np.ndarray              # (F, 3) int
    normals: np.ndarray | None = None  # (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def save(self, path) -> None:
        save_ply(path, self.vertices, normals=self.normals, faces=self.triangles)

    @classmethod
    def load(cls, path) -> "TriMesh":
        d = load_ply(path)
        faces = d.faces if d.faces is not None else np.zeros((0, 3), dtype=np.int64)
        return cls(d.vertices, faces, d.normals)


def _lattice(grid: SparseVoxelGrid, cells_per_voxel: int):
    """Occupied-cell mask and lattice point mask over the grid's key bounding box."""
    kmin, occ = grid.dense()
    c = cells_per_voxel
    cell_mask = np.repeat(np.repeat(np.repeat(occ, c, 0), c, 1), c, 2)
    shape = tuple(s + 1 for s in cell_mask.shape)
    point_mask = np.zeros(shape, dtype=bool)
    # a lattice point is needed when any of the (up to 8) cells sharing it is occupied
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                point_mask[dx:dx + cell_mask.shape[0], dy:dy + cell_mask.shape[1], dz:dz + cell_mask.shape[2]] |= cell_mask
    origin = grid.cell_lo(kmin)
    return origin, cell_mask, point_mask


def marching_cubes(sdf_fn, grid: SparseVoxelGrid, cells_per_voxel: int = 8, normal_fn=None,
                   chunk: int = 65536) -> TriMesh:
    """Triangulate ``sdf_fn = 0`` inside the occupied voxels of ``grid``.

    ``sdf_fn`` maps ``(N, 3)`` points to ``(N,)`` values. ``normal_fn``, if
    given, maps vertices to SDF gradients, which become unit vertex normals.
    """
    if cells_per_voxel < 1:
        raise ValueError("cells_per_voxel must be >= 1")
    if len(grid) == 0:
        log.warning("empty voxel grid: nothing to mesh")
        return TriMesh.empty()
    h = grid.voxel_size / cells_per_voxel
    origin, cell_mask, point_mask = _lattice(grid, cells_per_voxel)
    idx = np.argwhere(point_mask)
    pts = origin + idx * h
    vals = np.concatenate([np.asarray(sdf_fn(pts[s:s + chunk]), dtype=np.float64).reshape(-1)
                           for s in range(0, len(pts), chunk)])
    finite = np.isfinite(vals)
    if not finite.all():
        raise FloatingPointError(f"SDF evaluator returned {int((~finite).sum())} non-finite values")
    # points outside the envelope are never touched by a kept cube; any finite value will do
    vol = np.full(point_mask.shape, 1.0 + np.abs(vals).max())
    vol[tuple(idx.T)] = vals
    if vals.min() > 0 or vals.max() < 0:
        log.warning("SDF has no sign change inside the voxel envelope; mesh is empty")
        return TriMesh.empty()
    # skimage keeps a cube when its max corner is masked in, so shift the cell mask by one
    mask = np.zeros(point_mask.shape, dtype=bool)
    mask[1:, 1:, 1:] = cell_mask
    try:
        verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(h, h, h), mask=mask,
                                                    method="lorensen", allow_degenerate=False)
    except (ValueError, RuntimeError) as e:
        log.warning("marching cubes found no surface (%s)", e)
        return TriMesh.empty()
    verts = verts + origin
    mesh = TriMesh(verts, faces)
    mesh = _drop_degenerate(mesh)
    if normal_fn is not None and len(mesh.vertices):
        g = np.asarray(normal_fn(mesh.vertices), dtype=np.float64).reshape(-1, 3)
        n = np.linalg.norm(g, axis=1, keepdims=True)
        mesh.normals = g / np.where(n > 0, n, 1.0)
    return mesh


def _drop_degenerate(mesh: TriMesh) -> TriMesh:
    keep = mesh.areas() > MIN_AREA
    tris = mesh.triangles[keep]
    used = np.unique(tris)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(mesh.vertices[used], remap[tris], None if mesh.normals is None else mesh.normals[used])


def sample_mesh_points(mesh: TriMesh, density: float, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples, ``round(density * area)`` of them."""
    if not density > 0:
        raise ValueError("density must be positive")
    if len(mesh) == 0:
        return np.zeros((0, 3))
    areas = mesh.areas()
    total = float(areas.sum())
    n = int(round(density * total))
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    v = mesh.vertices[mesh.triangles[tri]]
    return (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
