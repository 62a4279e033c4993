import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfrecon.geometry import Ray, SparseVoxelGrid, build_octree, dilate, ray_aabb_batch, voxelize_points
from sdfrecon.ply import load_ply
from sdfrecon.sampling import (
    STAGE_IMPORTANCE,
    STAGE_SURFACE,
    STAGE_VOXEL,
    RaySamples,
    SamplingConfig,
    SdfCache,
    export_samples_ply,
    hybrid_sample,
    hybrid_sample_batch,
    importance_draw,
    importance_sample,
    invert_cdf,
    prune_rays,
    query_surface,
    refresh_cache,
    sample_rays,
    sphere_intervals,
    sphere_sample,
    sphere_sample_batch,
    surface_guided_sample,
    voxel_guided_sample,
)

RADIUS = 1.0


def sphere_sdf(x):
    return np.linalg.norm(np.asarray(x).reshape(-1, 3), axis=1) - RADIUS


def fibonacci_sphere(n, r=RADIUS):
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    th = np.pi * (1 + 5 ** 0.5) * k
    return r * np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], 1)


@pytest.fixture(scope="module")
def sphere_scene():
    grid = dilate(voxelize_points(fibonacci_sphere(6000), 0.1, origin=(-2.0, -2.0, -2.0)), 1)
    cache = SdfCache.build(grid, depth=6, refresh_period=10)
    refresh_cache(cache, sphere_sdf, 0, force=True)
    return grid, cache


def hitting_rays(rng, n, dist=3.0, spread=0.9):
    """Rays from a sphere of radius ``dist`` aimed at points inside a disc of radius ``spread``."""
    o = fibonacci_sphere(1000, dist)[rng.integers(0, 1000, n)] + rng.normal(scale=0.05, size=(n, 3))
    target = rng.uniform(-spread, spread, (n, 3)) * 0.577
    d = target - o
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


def true_hit(o, d, r=RADIUS):
    b = np.einsum("ij,ij->i", o, d)
    disc = b * b - (np.einsum("ij,ij->i", o, o) - r * r)
    return -b - np.sqrt(disc), disc > 0


def cfg(**kw):
    base = dict(strategy="hybrid", n_v=8, n_s=8, t_s=0.025, jitter=False, sphere_radius=1.8,
                importance_sharpness=64.0, merge_eps=1e-7)
    base.update(kw)
    return SamplingConfig(**base)


class TestSphereSample:
    def test_chord_bins(self):
        s = sphere_sample(Ray(np.array([0, 0, -2.0]), np.array([0, 0, 1.0])), 4, 1.0)
        np.testing.assert_allclose(s.t[0], [1.25, 1.75, 2.25, 2.75])

    def test_tangent(self):
        s = sphere_sample(Ray(np.array([1.0, 0, -2.0]), np.array([0, 0, 1.0])), 5, 1.0)
        assert s.t.shape == (1, 5) and np.all(s.t == 2.0)

    def test_miss(self):
        s = sphere_sample(Ray(np.array([2.0, 0, -2.0]), np.array([0, 0, 1.0])), 5, 1.0)
        assert s.t.shape == (1, 0) and not s.valid[0]

    def test_membership(self):
        rng = np.random.default_rng(0)
        o = rng.uniform(-3, 3, (2000, 3))
        d = rng.normal(size=(2000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        c = np.array([0.2, -0.1, 0.3])
        s = sphere_sample_batch(o, d, 16, 1.3, c, rng)
        p = s.points(o, d)[s.valid]
        assert s.valid.sum() > 100
        assert np.all(np.linalg.norm(p - c, axis=-1) <= 1.3 + 1e-9)


class TestVoxelSample:
    def test_single_voxel(self):
        grid = SparseVoxelGrid(np.zeros(3), 1.0, np.array([[1, 0, 0]]))
        s = voxel_guided_sample(Ray(np.array([0, 0.5, 0.5]), np.array([1.0, 0, 0])), grid, 2)
        np.testing.assert_allclose(s.t[0], [1.25, 1.75])

    def test_spacing(self):
        grid = SparseVoxelGrid(np.zeros(3), 1.0, np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]))
        s = voxel_guided_sample(Ray(np.array([-1, 0.5, 0.5]), np.array([1.0, 0, 0])), grid, 8)
        np.testing.assert_allclose(np.diff(s.t[0]), 3 / 8)

    def test_membership(self, sphere_scene):
        grid, _ = sphere_scene
        rng = np.random.default_rng(1)
        o, d = hitting_rays(rng, 500, spread=2.0)
        from sdfrecon.geometry import ray_grid_intersect_batch
        a, b, hit = ray_grid_intersect_batch(o, d, grid)
        for r in np.flatnonzero(hit)[:200]:
            s = voxel_guided_sample(Ray(o[r], d[r]), grid, 8, rng)
            assert np.all((s.t[0] >= a[r]) & (s.t[0] <= b[r]))


class TestSurfaceQuery:
    def _row_cache(self, values):
        grid = SparseVoxelGrid(np.zeros(3), 1.0, np.array([[i, 0, 0] for i in range(len(values))]))
        cache = SdfCache(build_octree(grid, 2))
        cache.tree.sdf[:] = values
        return cache

    def test_linear_interpolation(self):
        cache = self._row_cache([0.5, -0.5, -1.0, -1.0])
        assert query_surface(cache, Ray(np.array([-0.5, 0.5, 0.5]), np.array([1.0, 0, 0]))) == pytest.approx(1.5)

    def test_first_sign_change(self):
        cache = self._row_cache([0.5, -0.5, 0.5, -0.5])
        assert query_surface(cache, Ray(np.array([-0.5, 0.5, 0.5]), np.array([1.0, 0, 0]))) == pytest.approx(1.5)

    def test_all_positive(self):
        cache = self._row_cache([0.5, 0.4, 0.3, 0.2])
        assert query_surface(cache, Ray(np.array([-0.5, 0.5, 0.5]), np.array([1.0, 0, 0]))) is None

    def test_unset_leaves(self):
        cache = self._row_cache([np.nan] * 4)
        assert query_surface(cache, Ray(np.array([-0.5, 0.5, 0.5]), np.array([1.0, 0, 0]))) is None

    def test_analytic_sphere(self, sphere_scene):
        _, cache = sphere_scene
        rng = np.random.default_rng(2)
        o, d = hitting_rays(rng, 400)
        t_true, hit = true_hit(o, d)
        idx = np.flatnonzero(hit)[:100]
        assert len(idx) == 100
        for r in idx:
            th = query_surface(cache, Ray(o[r], d[r]))
            assert th is not None and abs(th - t_true[r]) <= cache.leaf_diameter

    def test_refresh_payload(self, sphere_scene):
        grid, _ = sphere_scene
        cache = SdfCache.build(grid, 6, refresh_period=5)
        assert cache.refresh(sphere_sdf, 3)
        np.testing.assert_allclose(cache.tree.sdf, np.linalg.norm(cache.tree.leaf_centers(), axis=1) - 1, atol=1e-6)
        assert np.all(cache.tree.stamp == 3)
        before = cache.tree.sdf.copy()
        assert not cache.refresh(sphere_sdf, 7)  # not due yet
        assert cache.refresh(sphere_sdf, 8)
        np.testing.assert_array_equal(cache.tree.sdf, before)
        assert np.all(cache.tree.stamp <= 8)


class TestSurfaceSample:
    def test_window(self):
        s = surface_guided_sample(None, 2.0, 0.5, 2)
        np.testing.assert_allclose(s.t[0], [1.75, 2.25])
        assert np.all(s.stage == STAGE_SURFACE)

    def test_clamped_at_zero(self):
        s = surface_guided_sample(None, 0.1, 0.5, 4)
        assert s.t.min() >= 0

    def test_membership(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            th, ts = rng.uniform(0, 5), rng.uniform(0.01, 1)
            t = surface_guided_sample(None, th, ts, 8, rng).t
            assert np.all((t >= max(th - ts, 0)) & (t <= th + ts))


class TestImportance:
    def test_concentrated(self):
        t = np.linspace(0, 1, 11)[None]
        sdf = np.where(t < 0.45, 10.0, -10.0)  # all mass in [0.4, 0.5]
        new = importance_draw(t, sdf, 16, 64.0, np.random.default_rng(0))
        assert np.all((new >= 0.4) & (new <= 0.5))

    def test_uniform_fallback(self):
        t = np.array([[0.0, 1.0, 3.0, 4.0]])
        new = importance_draw(t, np.ones_like(t), 4, 64.0)
        np.testing.assert_allclose(new[0], [0.5, 1.5, 2.5, 3.5])

    def test_against_tabulated_cdf(self):
        rng = np.random.default_rng(4)
        n = 32
        u = (np.arange(n) + 0.5) / n
        for _ in range(20):
            t = np.sort(rng.uniform(0, 3, 9))[None]
            pdf = rng.uniform(0, 1, (1, 8)) * (rng.uniform(size=(1, 8)) > 0.3)
            if pdf.sum() == 0:
                pdf[0, 0] = 1.0
            pdf /= pdf.sum()
            got = invert_cdf(t, pdf, n)[0]
            # brute force: tabulate the CDF at 10^4 grid points by summing section masses
            grid = np.linspace(t[0, 0], t[0, -1], 10_000)
            cdf = np.zeros_like(grid)
            for k in range(8):
                w = t[0, k + 1] - t[0, k]
                if w > 0:
                    cdf += pdf[0, k] * np.clip((grid - t[0, k]) / w, 0, 1)
            step_mass = np.max(np.diff(cdf))
            assert np.all(np.abs(np.interp(got, grid, cdf) - u) <= step_mass + 1e-12)
            # and the inverse by search over the table lands on the same grid cell
            idx = np.searchsorted(cdf, u)
            assert np.all(np.abs(grid[np.clip(idx, 0, len(grid) - 1)] - got) <= grid[1] - grid[0] + 1e-12)

    def test_merge_into_existing(self):
        ex = RaySamples(np.array([[0.0, 1.0, 2.0]]), np.zeros((1, 3), np.int8), np.ones(1, bool))
        s = importance_sample(None, ex, np.array([[1.0, -1.0, -2.0]]), 4, 64.0)
        assert s.t.shape == (1, 7) and np.all(np.diff(s.t[0]) >= 0)
        assert (s.stage == STAGE_IMPORTANCE).sum() == 4


class TestHybrid:
    def test_count_24(self, sphere_scene):
        grid, cache = sphere_scene
        rng = np.random.default_rng(5)
        o, d = hitting_rays(rng, 300)
        s = hybrid_sample_batch(o, d, grid, cache, cfg(jitter=True), sphere_sdf, rng)
        assert s.t.shape[1] == 24 and s.valid.all()

    def test_cache_miss_fallback(self, sphere_scene):
        grid, _ = sphere_scene
        empty = SdfCache.build(grid, 6)
        rng = np.random.default_rng(6)
        o, d = hitting_rays(rng, 50)
        s = hybrid_sample_batch(o, d, grid, empty, cfg(), sphere_sdf)
        assert s.t.shape == (50, 24)
        assert not np.any(s.stage == STAGE_SURFACE)
        assert np.sum(s.stage == STAGE_VOXEL) == 50 * 16

    def test_staged_recomputation(self, sphere_scene):
        grid, cache = sphere_scene
        rng = np.random.default_rng(7)
        o, d = hitting_rays(rng, 40)
        c = cfg()
        s, stages = sample_rays(o, d, c, grid=grid, cache=cache, sdf_fn=sphere_sdf, return_stages=True)
        from sdfrecon.geometry import ray_grid_intersect_batch
        for r in range(40):
            a, b, hit = ray_grid_intersect_batch(o[r:r + 1], d[r:r + 1], grid)
            vox = voxel_guided_sample(Ray(o[r], d[r]), grid, 8).t[0]
            np.testing.assert_allclose(stages[0][r], vox, rtol=0, atol=1e-12)
            th = cache.query(o[r:r + 1], d[r:r + 1], a, b)[0]
            assert np.isfinite(th)
            surf = surface_guided_sample(None, th, c.t_s, 8).t[0]
            np.testing.assert_allclose(stages[1][r], surf, rtol=0, atol=1e-12)
            ex = RaySamples(np.sort(np.r_[vox, surf])[None], np.zeros((1, 16), np.int8), np.ones(1, bool))
            sdf = sphere_sdf(o[r] + ex.t[0, :, None] * d[r])
            imp = importance_sample(None, ex, sdf[None], 8, 64.0)
            np.testing.assert_allclose(s.t[r], imp.t[0], rtol=0, atol=1e-6)
            assert (s.stage[r] == STAGE_SURFACE).sum() == 8

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6), st.booleans())
    def test_strictly_ascending(self, sphere_scene, seed, n_v, n_s, jitter):
        grid, cache = sphere_scene
        rng = np.random.default_rng(seed)
        o, d = hitting_rays(rng, 20)
        c = cfg(n_v=n_v, n_s=n_s, jitter=jitter)
        s = hybrid_sample_batch(o, d, grid, cache, c, sphere_sdf, rng if jitter else None)
        assert s.t.shape[1] == n_v + 2 * n_s
        assert np.all(np.diff(s.t[s.valid], axis=1) > 0)
        assert np.all(s.t >= 0)

    def test_single_ray_form(self, sphere_scene):
        grid, cache = sphere_scene
        s = hybrid_sample(Ray(np.array([0, 0, -3.0]), np.array([0, 0, 1.0])), grid, cache, cfg(), sphere_sdf)
        assert s.t.shape == (1, 24)
        assert np.any(np.abs(s.t[0] - 2.0) < 0.025)

    def test_voxel_and_sphere_strategies(self, sphere_scene):
        grid, cache = sphere_scene
        rng = np.random.default_rng(8)
        o, d = hitting_rays(rng, 30)
        for strat in ("voxel", "sphere"):
            s = sample_rays(o, d, cfg(strategy=strat), rng, grid=grid, cache=cache, sdf_fn=sphere_sdf)
            assert s.t.shape == (30, 24) and not np.any(s.stage == STAGE_SURFACE)

    def test_near_surface_density(self, sphere_scene):
        grid, cache = sphere_scene
        rng = np.random.default_rng(9)
        o, d = hitting_rays(rng, 1000)
        _, hit = true_hit(o, d)
        o, d = o[hit], d[hit]
        c = cfg(jitter=True)
        hy = hybrid_sample_batch(o, d, grid, cache, c, sphere_sdf, rng)
        sp = sphere_sample_batch(o, d, 24, c.sphere_radius, rng=rng)

        def frac(s):
            return np.mean(np.abs(sphere_sdf(s.points(o, d).reshape(-1, 3)).reshape(s.t.shape)) < c.t_s, axis=1)

        assert np.mean(frac(hy) > frac(sp)) >= 0.95


class TestPrune:
    def _brute(self, o, d, grid):
        hit = np.zeros(len(o), bool)
        for k in grid.keys:
            lo = grid.cell_lo(k[None])[0]
            hit |= ray_aabb_batch(o, d, lo, lo + grid.voxel_size)[2]
        return hit

    def test_empty_region(self, sphere_scene):
        grid, _ = sphere_scene
        o = np.tile([10.0, 10, 10], (100, 1))
        _, frac = prune_rays(o, np.tile([1.0, 0, 0], (100, 1)), grid)
        assert frac == 0.0

    def test_full_coverage(self):
        r = np.arange(-3, 3)
        keys = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
        grid = SparseVoxelGrid(np.zeros(3), 1.0, keys)
        rng = np.random.default_rng(0)
        d = rng.normal(size=(500, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        _, frac = prune_rays(rng.uniform(-1, 1, (500, 3)), d, grid)
        assert frac == 1.0

    def test_brute_force(self, sphere_scene):
        grid, _ = sphere_scene
        rng = np.random.default_rng(1)
        o, d = hitting_rays(rng, 3000, spread=3.0)
        keep, frac = prune_rays(o, d, grid)
        np.testing.assert_array_equal(keep, self._brute(o, d, grid))
        assert 0 < frac < 1

    def test_sky_rays_kept(self, sphere_scene):
        grid, _ = sphere_scene
        o = np.tile([10.0, 10, 10], (4, 1))
        keep, frac = prune_rays(o, np.tile([1.0, 0, 0], (4, 1)), grid, sky=[True, False, True, False])
        np.testing.assert_array_equal(keep, [True, False, True, False])
        assert frac == 0.5


def test_export_ply(tmp_path, sphere_scene):
    grid, cache = sphere_scene
    o, d = hitting_rays(np.random.default_rng(10), 10)
    s = hybrid_sample_batch(o, d, grid, cache, cfg(), sphere_sdf)
    n = export_samples_ply(tmp_path / "s.ply", o, d, s)
    ply = load_ply(tmp_path / "s.ply")
    assert n == len(ply.vertices) == 240
    assert set(np.unique(ply.extra["stage"])) <= {0, 1, 2}


def test_sphere_intervals_inside_origin():
    a, b, hit = sphere_intervals(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), 2.0)
    assert hit[0] and a[0] == 0 and b[0] == 2.0


def test_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(n_v=0)
    with pytest.raises(ValueError):
        SamplingConfig(strategy="grid")
    assert SamplingConfig().samples_per_ray == 24
