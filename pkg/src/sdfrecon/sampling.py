"""Ray sampling strategies and the SDF cache they consult.

Three strategies share one layout of ``n_v + 2 n_s`` samples per ray:

* ``sphere``  - ``n_v + n_s`` regular samples on the chord through a bounding
  sphere, then one importance pass of ``n_s``.
* ``voxel``   - ``n_v`` regular samples on the interval where the ray crosses
  the sparse voxel envelope, a second stratum of ``n_s`` on the same interval,
  then one importance pass of ``n_s``.
* ``hybrid``  - as ``voxel`` but the second stratum is replaced by ``n_s``
  samples in a window of half-width ``t_s`` around the surface position read
  from the SDF cache, whenever the cache brackets a zero crossing.

Every sample carries a stage tag (see ``STAGE_*``) for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Octree, Ray, SparseVoxelGrid, build_octree, ray_aabb_batch, ray_grid_intersect_batch, \
    traverse_lattice
from .ply import save_ply
from .renderer import alphas_from_sdf, weights_from_alphas

STAGE_VOXEL, STAGE_SURFACE, STAGE_IMPORTANCE, STAGE_SPHERE = 0, 1, 2, 3
STRATEGIES = ("sphere", "voxel", "hybrid")


@dataclass(frozen=True)
class SamplingConfig:
    strategy: str = "hybrid"
    n_v: int = 8
    n_s: int = 8
    t_s: float = 0.04375
    jitter: bool = True
    sphere_radius: float = 1.0
    sphere_center: tuple = (0.0, 0.0, 0.0)
    importance_sharpness: float = 64.0
    merge_eps: float = 1e-7

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if self.n_v < 1 or self.n_s < 1:
            raise ValueError("n_v and n_s must be >= 1")
        if not self.t_s > 0:
            raise ValueError("t_s must be positive")
        if not self.sphere_radius > 0:
            raise ValueError("sphere radius must be positive")

    @property
    def samples_per_ray(self) -> int:
        return self.n_v + 2 * self.n_s

    @classmethod
    def from_scene_config(cls, cfg, scale: float, extent: float, jitter: bool = True, strategy: str | None = None):
        """``scale`` converts the normalised importance sharpness to world units; ``extent`` sets the merge epsilon."""
        return cls(strategy or cfg.strategy, cfg.n_v, cfg.n_s, cfg.sampling_radius, jitter, cfg.sphere_radius,
                   tuple(cfg.sphere_center), cfg.importance_sharpness / scale, 1e-7 * extent)


@dataclass
class RaySamples:
    """Per-ray ascending sample depths ``t`` and stage tags, both ``(R, m)``.

    Rows with ``valid == False`` (rays that miss the sampling region) hold zeros.
    """

    t: np.ndarray
    stage: np.ndarray
    valid: np.ndarray

    @classmethod
    def empty(cls, n_rays: int = 1, m: int = 0) -> "RaySamples":
        return cls(np.zeros((n_rays, m)), np.zeros((n_rays, m), dtype=np.int8), np.zeros(n_rays, dtype=bool))

    def __len__(self) -> int:
        return len(self.t)

    def points(self, origins, dirs) -> np.ndarray:
        return np.asarray(origins)[:, None, :] + self.t[..., None] * np.asarray(dirs)[:, None, :]


# ------------------------------------------------------------------ primitives
def stratified(a, b, n: int, rng=None, offset: float = 0.5) -> np.ndarray:
    """``n`` samples per row of ``[a, b]``: bin ``k`` gets ``a + (k + u)(b - a)/n``.

    ``u`` is uniform in ``[0, 1)`` when ``rng`` is given, else ``offset``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    u = rng.random((len(a), n)) if rng is not None else np.full((len(a), n), offset)
    return a[:, None] + (np.arange(n)[None, :] + u) * ((b - a) / n)[:, None]


def sphere_intervals(origins, dirs, radius: float, center=(0.0, 0.0, 0.0)):
    """Chord ``[t_in, t_out]`` of each ray through a sphere (``t_in`` clamped at 0)."""
    oc = np.asarray(origins, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    b = np.einsum("ij,ij->i", oc, d)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - radius * radius)
    root = np.sqrt(np.maximum(disc, 0.0))
    t_out = -b + root
    hit = (disc >= 0) & (t_out >= 0)
    return np.where(hit, np.maximum(-b - root, 0.0), 0.0), np.where(hit, t_out, 0.0), hit


def merge_sorted(ts, stages, eps: float):
    """Merge per-stage sample arrays into ascending rows.

    Near-duplicates are pushed forward so consecutive samples differ by at
    least ``eps``; the per-ray count is preserved.
    """
    t = np.concatenate(ts, axis=1)
    s = np.concatenate(stages, axis=1)
    order = np.argsort(t, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    s = np.take_along_axis(s, order, axis=1)
    if eps > 0 and t.shape[1] > 1:
        ramp = eps * np.arange(t.shape[1])
        t = np.maximum.accumulate(t - ramp, axis=1) + ramp
    return t, s


def importance_draw(t, sdf, n: int, sharpness: float, rng=None) -> np.ndarray:
    """Draw ``n`` depths per ray from the piecewise-constant PDF of section weights.

    Section weights come from the rendering opacity construction at the given
    sharpness; rows whose weights are all zero fall back to a uniform density
    over ``[t[0], t[-1]]``.
    """
    t = np.asarray(t, dtype=np.float64)
    R, m = t.shape
    if m < 2:
        raise ValueError("importance sampling needs at least two existing samples")
    w = weights_from_alphas(alphas_from_sdf(np.asarray(sdf, dtype=np.float64), sharpness))
    total = w.sum(axis=1, keepdims=True)
    lengths = np.diff(t, axis=1)
    uniform = lengths / np.maximum(lengths.sum(axis=1, keepdims=True), 1e-300)
    pdf = np.where(total > 0, w / np.where(total > 0, total, 1.0), uniform)
    return invert_cdf(t, pdf, n, rng)


def invert_cdf(t, pdf, n: int, rng=None) -> np.ndarray:
    """Inverse-CDF sampling of a piecewise-constant density over the sections of ``t``."""
    R, m = t.shape
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = np.maximum(cdf[:, -1], 1.0)
    u = stratified(np.zeros(R), np.ones(R), n, rng)
    # a single global search over rows shifted apart by 2
    shift = 2.0 * np.arange(R)[:, None]
    pos = np.searchsorted((cdf + shift).ravel(), (u + shift).ravel(), side="right").reshape(R, n)
    sec = np.clip(pos - 1 - (m * np.arange(R))[:, None], 0, m - 2)
    c0 = np.take_along_axis(cdf, sec, axis=1)
    p = np.take_along_axis(pdf, sec, axis=1)
    ta = np.take_along_axis(t, sec, axis=1)
    tb = np.take_along_axis(t, sec + 1, axis=1)
    frac = np.clip(np.where(p > 0, (u - c0) / np.where(p > 0, p, 1.0), 0.5), 0.0, 1.0)
    return ta + frac * (tb - ta)


# ------------------------------------------------------------------ SDF cache
class SdfCache:
    """Octree over the voxel envelope whose leaves hold recent SDF readings."""

    def __init__(self, tree: Octree, refresh_period: int = 2000):
        if refresh_period < 1:
            raise ValueError("refresh period must be >= 1")
        self.tree = tree
        self.refresh_period = int(refresh_period)
        self.last_refresh: int | None = None

    @classmethod
    def build(cls, grid: SparseVoxelGrid, depth: int, refresh_period: int = 2000) -> "SdfCache":
        return cls(build_octree(grid, depth), refresh_period)

    @property
    def leaf_diameter(self) -> float:
        return self.tree.leaf_edge * np.sqrt(3.0)

    @property
    def has_values(self) -> bool:
        return bool(np.any(np.isfinite(self.tree.sdf)))

    def due(self, iteration: int) -> bool:
        return self.last_refresh is None or iteration - self.last_refresh >= self.refresh_period

    def refresh(self, sdf_fn, iteration: int, force: bool = False) -> bool:
        """Re-evaluate every leaf center when due (or forced); returns whether it ran."""
        if not (force or self.due(iteration)):
            return False
        self.tree.sdf[:] = np.asarray(sdf_fn(self.tree.leaf_centers()), dtype=np.float64).reshape(-1)
        self.tree.stamp[:] = iteration
        self.last_refresh = int(iteration)
        return True

    def query(self, origins, dirs, t0=None, t1=None, chunk: int = 4096) -> np.ndarray:
        """Front-most cached zero crossing per ray (``nan`` where none).

        Leaves are visited in ray order; each set leaf contributes its reading
        at the depth of its center's projection onto the ray. The first
        positive-to-nonpositive change between consecutive readings is
        linearly interpolated.
        """
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        R = len(origins)
        out = np.full(R, np.nan)
        if R == 0 or not self.has_values:
            return out
        tree = self.tree
        a, b, hit = ray_aabb_batch(origins, dirs, tree.lo, tree.lo + tree.edge)
        a = np.maximum(a, 0.0)
        if t0 is not None:
            a = np.maximum(a, np.asarray(t0, dtype=np.float64))
        if t1 is not None:
            b = np.minimum(b, np.asarray(t1, dtype=np.float64))
        b = np.where(hit & (b > a), b, a)
        for s in range(0, R, chunk):
            sl = slice(s, s + chunk)
            o, d = origins[sl], dirs[sl]
            _, _, ijk, valid = traverse_lattice(o, d, a[sl], b[sl], tree.lo, tree.leaf_edge, (tree.n,) * 3)
            li = np.where(valid, tree.leaf_index(ijk), -1)
            val = np.where(li >= 0, tree.sdf[np.maximum(li, 0)], np.nan)
            have = np.isfinite(val)
            centers = tree.lo + (tree.leaf_keys[np.maximum(li, 0)] + 0.5) * tree.leaf_edge
            tc = np.einsum("rmk,rk->rm", centers - o[:, None, :], d)
            M = val.shape[1]
            pos = np.where(have, np.arange(M)[None, :], -1)
            last = np.maximum.accumulate(pos, axis=1)
            prev = np.concatenate([np.full((len(o), 1), -1), last[:, :-1]], axis=1)
            pv = np.take_along_axis(val, np.maximum(prev, 0), axis=1)
            pt = np.take_along_axis(tc, np.maximum(prev, 0), axis=1)
            cond = have & (prev >= 0) & (pv > 0) & (val <= 0)
            if not cond.any():
                continue
            k = np.argmax(cond, axis=1)
            rows = np.arange(len(o))
            dp, dk = pv[rows, k], val[rows, k]
            tp, tk = pt[rows, k], tc[rows, k]
            with np.errstate(divide="ignore", invalid="ignore"):
                th = tp + dp / (dp - dk) * (tk - tp)
            out[sl] = np.where(cond.any(axis=1), th, np.nan)
        return out


def refresh_cache(cache: SdfCache, field, iteration: int, force: bool = False) -> bool:
    """Refresh leaf payloads from ``field`` (an object with ``sdf_value`` or a plain callable)."""
    fn = field.sdf_value if hasattr(field, "sdf_value") else field
    return cache.refresh(fn, iteration, force)


def query_surface(cache: SdfCache, ray: Ray):
    th = cache.query(ray.origin[None], ray.direction[None])[0]
    return None if np.isnan(th) else float(th)


# -------------------------------------------------------------- batched stages
def sphere_sample_batch(origins, dirs, n: int, radius: float, center=(0.0, 0.0, 0.0), rng=None) -> RaySamples:
    a, b, hit = sphere_intervals(origins, dirs, radius, center)
    t = np.where(hit[:, None], stratified(a, b, n, rng), 0.0)
    return RaySamples(t, np.full(t.shape, STAGE_SPHERE, dtype=np.int8), hit)


def voxel_guided_sample_batch(origins, dirs, grid: SparseVoxelGrid, n_v: int, rng=None, intervals=None) -> RaySamples:
    a, b, hit = intervals if intervals is not None else ray_grid_intersect_batch(origins, dirs, grid)
    t = np.where(hit[:, None], stratified(a, b, n_v, rng), 0.0)
    return RaySamples(t, np.full(t.shape, STAGE_VOXEL, dtype=np.int8), np.asarray(hit))


def surface_guided_sample_batch(t_hat, t_s: float, n_s: int, rng=None) -> np.ndarray:
    t_hat = np.asarray(t_hat, dtype=np.float64).reshape(-1)
    return stratified(np.maximum(t_hat - t_s, 0.0), t_hat + t_s, n_s, rng)


def sample_rays(origins, dirs, cfg: SamplingConfig, rng=None, *, grid=None, intervals=None, cache=None,
                sdf_fn=None, return_stages: bool = False):
    """Run the configured strategy on a ray batch; every valid row gets ``n_v + 2 n_s`` samples.

    ``intervals`` (``t_in, t_out, hit`` over the voxel envelope) may be passed
    precomputed. ``sdf_fn`` maps ``(N, 3)`` points to SDF values and drives the
    importance pass. With ``return_stages`` the per-stage depth arrays are
    returned as well, before merging.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = len(origins)
    n_v, n_s = cfg.n_v, cfg.n_s
    if sdf_fn is None:
        raise ValueError("importance pass needs an SDF evaluator")
    if cfg.strategy == "sphere":
        a, b, hit = sphere_intervals(origins, dirs, cfg.sphere_radius, cfg.sphere_center)
        first = stratified(a, b, n_v + n_s, rng)
        parts = [(first, STAGE_SPHERE)]
    else:
        if intervals is None:
            if grid is None:
                raise ValueError("voxel-guided sampling needs the voxel grid or precomputed intervals")
            intervals = ray_grid_intersect_batch(origins, dirs, grid)
        a, b, hit = (np.asarray(x) for x in intervals)
        coarse = stratified(a, b, n_v, rng)
        # fallback stratum sits on bin starts so it interleaves with the bin-center stratum
        second = stratified(a, b, n_s, rng, offset=0.0)
        second_stage = np.full((R, n_s), STAGE_VOXEL, dtype=np.int8)
        if cfg.strategy == "hybrid" and cache is not None:
            t_hat = cache.query(origins, dirs, a, b)
            found = hit & np.isfinite(t_hat)
            if found.any():
                surf = surface_guided_sample_batch(np.where(found, t_hat, 0.0), cfg.t_s, n_s, rng)
                second = np.where(found[:, None], surf, second)
                second_stage[found] = STAGE_SURFACE
        parts = [(coarse, STAGE_VOXEL), (second, second_stage)]
    ts = [p[0] for p in parts]
    ss = [np.broadcast_to(np.asarray(p[1], dtype=np.int8), p[0].shape) for p in parts]
    t0, s0 = merge_sorted(ts, ss, cfg.merge_eps)
    extra = np.zeros((R, n_s))
    if hit.any():
        pts = origins[hit, None, :] + t0[hit, :, None] * dirs[hit, None, :]
        sdf = np.asarray(sdf_fn(pts.reshape(-1, 3)), dtype=np.float64).reshape(-1, t0.shape[1])
        extra[hit] = importance_draw(t0[hit], sdf, n_s, cfg.importance_sharpness, rng)
    t, s = merge_sorted([t0, extra], [s0, np.full((R, n_s), STAGE_IMPORTANCE, dtype=np.int8)], cfg.merge_eps)
    t = np.where(hit[:, None], t, 0.0)
    out = RaySamples(t, s, hit.copy())
    if return_stages:
        return out, ts + [extra]
    return out


def hybrid_sample_batch(origins, dirs, grid, cache, cfg: SamplingConfig, sdf_fn, rng=None, intervals=None):
    if cfg.strategy != "hybrid":
        cfg = SamplingConfig(**{**cfg.__dict__, "strategy": "hybrid"})
    return sample_rays(origins, dirs, cfg, rng, grid=grid, intervals=intervals, cache=cache, sdf_fn=sdf_fn)


# ------------------------------------------------------------ single-ray forms
def _single(samples: RaySamples) -> RaySamples:
    return samples if samples.valid[0] else RaySamples.empty(1)


def sphere_sample(ray: Ray, n: int, radius: float, center=(0.0, 0.0, 0.0), rng=None) -> RaySamples:
    return _single(sphere_sample_batch(ray.origin[None], ray.direction[None], n, radius, center, rng))


def voxel_guided_sample(ray: Ray, grid: SparseVoxelGrid, n_v: int, rng=None) -> RaySamples:
    return _single(voxel_guided_sample_batch(ray.origin[None], ray.direction[None], grid, n_v, rng))


def surface_guided_sample(ray: Ray, t_hat: float, t_s: float, n_s: int, rng=None) -> RaySamples:
    t = surface_guided_sample_batch([t_hat], t_s, n_s, rng)
    return RaySamples(t, np.full(t.shape, STAGE_SURFACE, dtype=np.int8), np.ones(1, dtype=bool))


def importance_sample(ray: Ray, existing: RaySamples, sdf_values, n_s: int, sharpness: float, rng=None,
                      eps: float = 0.0) -> RaySamples:
    """Add ``n_s`` importance samples to ``existing`` and return the merged set."""
    new = importance_draw(existing.t, np.asarray(sdf_values).reshape(existing.t.shape), n_s, sharpness, rng)
    t, s = merge_sorted([existing.t, new], [existing.stage, np.full(new.shape, STAGE_IMPORTANCE, np.int8)], eps)
    return RaySamples(t, s, existing.valid.copy())


def hybrid_sample(ray: Ray, grid: SparseVoxelGrid, cache: SdfCache, cfg: SamplingConfig, sdf_fn,
                  rng=None) -> RaySamples:
    return _single(hybrid_sample_batch(ray.origin[None], ray.direction[None], grid, cache, cfg, sdf_fn, rng))


# --------------------------------------------------------------------- pruning
def prune_rays(origins, dirs, grid: SparseVoxelGrid, sky=None, intervals=None):
    """Keep rays that cross the voxel envelope (or are sky rays); returns ``(mask, kept fraction)``."""
    if intervals is None:
        intervals = ray_grid_intersect_batch(origins, dirs, grid)
    keep = np.asarray(intervals[2], dtype=bool).copy()
    if sky is not None:
        keep |= np.asarray(sky, dtype=bool).reshape(-1)
    return keep, (float(keep.mean()) if keep.size else 0.0)


# ------------------------------------------------------------------ debugging
def export_samples_ply(path, origins, dirs, samples: RaySamples) -> int:
    """Write every valid sample as a point with an integer ``stage`` property; returns the point count."""
    pts = samples.points(origins, dirs)[samples.valid].reshape(-1, 3)
    stage = samples.stage[samples.valid].reshape(-1).astype(np.int32)
    save_ply(path, pts, extra={"stage": stage})
    return len(pts)
