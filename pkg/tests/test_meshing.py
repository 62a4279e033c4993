import logging

import numpy as np
import pytest
from scipy.stats import chisquare

from sdfrecon.geometry import SparseVoxelGrid
from sdfrecon.meshing import TriMesh, marching_cubes, sample_mesh_points


def full_grid(lo=-4, hi=4, voxel=0.25):
    r = np.arange(lo, hi)
    keys = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    return SparseVoxelGrid((0, 0, 0), voxel, keys)


def sphere_sdf(p):
    return np.linalg.norm(p, axis=1) - 0.5


class TestMarchingCubes:
    def test_sphere_radii(self):
        g, cpv = full_grid(), 4
        h = g.voxel_size / cpv
        m = marching_cubes(sphere_sdf, g, cpv)
        r = np.linalg.norm(m.vertices, axis=1)
        assert len(m) > 100
        assert r.min() >= 0.5 - h * np.sqrt(3) and r.max() <= 0.5 + h * np.sqrt(3)
        # vertices sit on lattice edges, so the SDF there is bounded by |grad| * h
        assert np.abs(sphere_sdf(m.vertices)).max() <= h

    def test_constant_field_is_empty(self, caplog):
        with caplog.at_level(logging.WARNING):
            m = marching_cubes(lambda p: np.ones(len(p)), full_grid(), 2)
        assert len(m) == 0 and len(m.vertices) == 0
        assert "no sign change" in caplog.text

    def test_plane(self):
        g, cpv = full_grid(), 4
        h = g.voxel_size / cpv
        m = marching_cubes(lambda p: p[:, 2] - 0.013, g, cpv,
                           normal_fn=lambda p: np.tile([0.0, 0.0, 1.0], (len(p), 1)))
        assert np.all(np.abs(m.vertices[:, 2] - 0.013) <= h)
        np.testing.assert_allclose(m.normals, np.tile([0, 0, 1.0], (len(m.vertices), 1)))
        # geometric face normals agree with the SDF gradient orientation
        v = m.vertices[m.triangles]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        fn /= np.linalg.norm(fn, axis=1, keepdims=True)
        assert np.all(np.abs(fn[:, 2]) > 0.999)

    def test_restricted_to_envelope(self):
        rng = np.random.default_rng(0)
        keys = np.unique(rng.integers(-4, 4, (60, 3)), axis=0)
        g = SparseVoxelGrid((0, 0, 0), 0.25, keys)
        m = marching_cubes(sphere_sdf, g, 4)
        assert len(m) > 0
        lo = g.cell_lo(keys)[None] - 1e-12
        hi = lo + g.voxel_size + 2e-12
        inside = np.all((m.vertices[:, None] >= lo) & (m.vertices[:, None] <= hi), axis=2).any(axis=1)
        assert inside.all()

    def test_single_cube_cell(self):
        # one voxel, one lattice cell: the plane x = 0.3 must be cut inside that cell only
        g = SparseVoxelGrid((0, 0, 0), 1.0, [[0, 0, 0]])
        m = marching_cubes(lambda p: p[:, 0] - 0.3, g, 1)
        assert len(m) == 2
        np.testing.assert_allclose(m.vertices[:, 0], 0.3)
        assert m.vertices.min() >= 0.0 and m.vertices.max() <= 1.0

    def test_no_degenerate_triangles(self):
        m = marching_cubes(lambda p: np.linalg.norm(p - 0.01, axis=1) - 0.37, full_grid(), 3)
        assert m.areas().min() > 1e-12
        assert m.triangles.max() < len(m.vertices)

    def test_bad_resolution(self):
        with pytest.raises(ValueError):
            marching_cubes(sphere_sdf, full_grid(), 0)

    def test_non_finite_field(self):
        with pytest.raises(FloatingPointError):
            marching_cubes(lambda p: np.full(len(p), np.nan), full_grid(), 1)

    def test_ply_round_trip(self, tmp_path):
        m = marching_cubes(sphere_sdf, full_grid(), 2, normal_fn=lambda p: p)
        m.save(tmp_path / "m.ply")
        back = TriMesh.load(tmp_path / "m.ply")
        np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)
        np.testing.assert_array_equal(back.triangles, m.triangles)
        np.testing.assert_allclose(back.normals, m.normals, atol=1e-6)


UNIT_SQUARE = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


class TestSampling:
    def test_count_and_uniformity(self):
        p = sample_mesh_points(UNIT_SQUARE, 100.0, seed=3)
        assert abs(len(p) - 100) <= 30
        counts = np.histogram2d(p[:, 0], p[:, 1], bins=4, range=[[0, 1], [0, 1]])[0].ravel()
        assert chisquare(counts).pvalue > 0.01

    def test_large_sample_uniform(self):
        p = sample_mesh_points(UNIT_SQUARE, 20000.0, seed=0)
        counts = np.histogram2d(p[:, 0], p[:, 1], bins=4, range=[[0, 1], [0, 1]])[0].ravel()
        assert chisquare(counts).pvalue > 0.01

    def test_points_inside_triangle(self):
        tri = TriMesh([[0.1, 0.2, 0.3], [1.3, 0.1, -0.2], [0.4, 1.1, 0.5]], [[0, 1, 2]])
        p = sample_mesh_points(tri, 500.0, seed=1)
        a, b, c = tri.vertices
        M = np.stack([b - a, c - a], axis=1)
        uv, *_ = np.linalg.lstsq(M, (p - a).T, rcond=None)
        assert np.all(uv >= -1e-9) and np.all(uv.sum(0) <= 1 + 1e-9)
        np.testing.assert_allclose(M @ uv + a[:, None], p.T, atol=1e-12)

    def test_deterministic(self):
        np.testing.assert_array_equal(sample_mesh_points(UNIT_SQUARE, 50.0, 9), sample_mesh_points(UNIT_SQUARE, 50.0, 9))

    def test_bad_density(self):
        with pytest.raises(ValueError):
            sample_mesh_points(UNIT_SQUARE, 0.0)

    def test_empty_mesh(self):
        assert sample_mesh_points(TriMesh.empty(), 10.0).shape == (0, 3)
