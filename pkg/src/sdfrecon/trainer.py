"""Loss assembly, ray batching and the optimisation loop.

A training step renders a batch of pixel rays and minimises

    lambda_color * L1(color) + lambda_eik * eikonal + lambda_mask * BCE(sky opacity -> 0)

with Adam under a cosine learning-rate decay. Ray sampling follows the
schedule: ``voxel`` during the bootstrap phase, then the configured strategy;
the SDF cache is refreshed on a fixed period once surface guidance is active.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .config import SceneConfig
from .field import NeuralField, save_checkpoint
from .geometry import SparseVoxelGrid, dilate, ray_grid_intersect_batch, voxelize_points
from .renderer import render_backward, render_rays
from .sampling import SamplingConfig, SdfCache, prune_rays, sample_rays
from .scene_io import Scene, filter_sfm_points

log = logging.getLogger(__name__)

LOG_FIELDS = ["iteration", "loss", "color", "eikonal", "mask", "inv_s", "lr", "kept_fraction", "strategy",
              "surface_rays"]
MASK_CLAMP = 1e-5


class NumericalError(RuntimeError):
    """Raised when the loss or its gradient becomes non-finite."""


class BatchError(ValueError):
    """Raised when no trainable pixel remains after masking and pruning."""


@dataclass(frozen=True)
class LossWeights:
    color: float = 1.0
    eikonal: float = 0.1
    mask: float = 0.01

    def __post_init__(self):
        if min(self.color, self.eikonal, self.mask) < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------- losses
def color_loss(rendered, target):
    """Mean absolute error and its gradient w.r.t. ``rendered``."""
    rendered, target = np.asarray(rendered), np.asarray(target)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    if rendered.size == 0:
        return 0.0, np.zeros_like(rendered)
    diff = rendered - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def eikonal_loss(grads):
    """Mean of ``(|g| - 1)^2`` over points and its gradient w.r.t. ``grads``."""
    g = np.asarray(grads).reshape(-1, 3)
    if len(g) == 0:
        return 0.0, np.zeros_like(g)
    norm = np.linalg.norm(g, axis=1)
    dev = norm - 1.0
    safe = np.where(norm > 0, norm, 1.0)
    grad = (2.0 * dev / safe / len(g))[:, None] * g
    return float(np.mean(dev * dev)), grad


def mask_loss(opacity):
    """Binary cross-entropy of sky-ray opacities against 0 (inputs clamped to ``[1e-5, 1 - 1e-5]``)."""
    o = np.asarray(opacity, dtype=np.float64).reshape(-1)
    if o.size == 0:
        return 0.0, np.zeros_like(o)
    c = np.clip(o, MASK_CLAMP, 1.0 - MASK_CLAMP)
    inside = (o > MASK_CLAMP) & (o < 1.0 - MASK_CLAMP)
    return float(np.mean(-np.log1p(-c))), np.where(inside, 1.0 / (1.0 - c), 0.0) / o.size


# ---------------------------------------------------------------------- batches
def build_envelope(points, cfg: SceneConfig) -> SparseVoxelGrid:
    """Dilated voxelisation of the SfM points: the region all sampling and meshing is confined to."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise BatchError("scene has no usable SfM points after filtering; cannot build the voxel envelope")
    return dilate(voxelize_points(pts, cfg.voxel_size), cfg.dilation_radius)


def scene_envelope(scene: Scene, cfg: SceneConfig | None = None) -> SparseVoxelGrid:
    cfg = cfg or scene.config
    pts = filter_sfm_points(scene.points, cfg.min_track_len, cfg.max_reproj)
    return build_envelope(np.array([p.position for p in pts]).reshape(-1, 3), cfg)


@dataclass
class RayPool:
    """Every trainable pixel ray of a scene, with its voxel-envelope interval."""

    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    image_idx: np.ndarray
    sky: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    hit: np.ndarray
    kept_fraction: float

    def __len__(self) -> int:
        return len(self.origins)

    @classmethod
    def from_scene(cls, scene: Scene, grid: SparseVoxelGrid) -> "RayPool":
        parts = {k: [] for k in ("o", "d", "c", "i", "s")}
        total = 0
        for rec in scene.images:
            if rec.pixels is None:
                raise BatchError(f"image {rec.name} has no pixel data loaded")
            vv, uu = np.nonzero(~rec.transient)
            total += len(uu)
            o, d = rec.camera.rays(uu + 0.5, vv + 0.5)
            parts["o"].append(o)
            parts["d"].append(d)
            parts["c"].append(rec.pixels[vv, uu])
            parts["i"].append(np.full(len(uu), rec.index))
            parts["s"].append(rec.sky[vv, uu])
        o = np.concatenate(parts["o"]) if parts["o"] else np.zeros((0, 3))
        d = np.concatenate(parts["d"]) if parts["d"] else np.zeros((0, 3))
        sky = np.concatenate(parts["s"]) if parts["s"] else np.zeros(0, bool)
        t_in, t_out, hit = ray_grid_intersect_batch(o, d, grid)
        keep, frac = prune_rays(o, d, grid, sky, (t_in, t_out, hit))
        if not keep.any():
            raise BatchError("no trainable rays: every pixel is transient-masked or misses the voxel envelope")
        sel = np.flatnonzero(keep)
        return cls(o[sel], d[sel], np.concatenate(parts["c"])[sel], np.concatenate(parts["i"])[sel].astype(np.int64),
                   sky[sel], t_in[sel], t_out[sel], hit[sel], frac)


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    image_idx: np.ndarray
    sky: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    hit: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, rows) -> "RayBatch":
        return RayBatch(*(getattr(self, f)[rows] for f in self.__dataclass_fields__))


def make_batch(pool: RayPool, batch_size: int, rng) -> RayBatch:
    """Uniform draw (with replacement) over the trainable pixels of all images."""
    if len(pool) == 0:
        raise BatchError("ray pool is empty")
    sel = rng.integers(0, len(pool), batch_size)
    return RayBatch(pool.origins[sel], pool.dirs[sel], pool.colors[sel], pool.image_idx[sel], pool.sky[sel],
                    pool.t_in[sel], pool.t_out[sel], pool.hit[sel])


# --------------------------------------------------------------------- schedule
def strategy_at(cfg: SceneConfig, iteration: int) -> str:
    """``voxel`` during the bootstrap phase of a hybrid run; the fixed strategy otherwise."""
    if cfg.strategy == "hybrid" and iteration < cfg.bootstrap_iters:
        return "voxel"
    return cfg.strategy


def learning_rate(cfg: SceneConfig, iteration: int) -> float:
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        return cfg.lr * (iteration + 1) / cfg.warmup_iters
    span = max(cfg.total_iters - cfg.warmup_iters, 1)
    prog = min(max(iteration - cfg.warmup_iters, 0) / span, 1.0)
    final = cfg.lr * cfg.lr_final_ratio
    return final + 0.5 * (cfg.lr - final) * (1.0 + math.cos(math.pi * prog))


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            p = params[k]
            g = np.asarray(g, dtype=p.dtype)
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------------ state
@dataclass
class TrainState:
    config: SceneConfig
    field: NeuralField
    log_inv_s: np.ndarray
    grid: SparseVoxelGrid
    cache: SdfCache
    rng: np.random.Generator
    optimizer: Adam = dc_field(default_factory=Adam)
    iteration: int = 0
    extent: float = 1.0
    dump_dir: Path | None = None

    @property
    def inv_s(self) -> float:
        return float(np.exp(self.log_inv_s[0]))

    def sampling_config(self, strategy: str) -> SamplingConfig:
        return SamplingConfig.from_scene_config(self.config, self.field.scale, self.extent, True, strategy)

    def trainable(self) -> dict:
        return {**self.field.params, "log_inv_s": self.log_inv_s}


def init_state(config: SceneConfig, grid: SparseVoxelGrid, n_images: int, dtype=np.float32,
               dump_dir=None) -> TrainState:
    center, half = grid.center_and_extent()
    fld = NeuralField.from_config(config, n_images, center, half, seed=config.seed, dtype=dtype)
    # initial sharpness: init_inv_s_factor per unit of the normalised scene
    log_inv_s = np.array([math.log(config.init_inv_s_factor / half)])
    cache = SdfCache.build(grid, config.octree_depth, config.refresh_period)
    return TrainState(config, fld, log_inv_s, grid, cache, np.random.default_rng(config.seed),
                      extent=2.0 * half, dump_dir=None if dump_dir is None else Path(dump_dir))


@dataclass
class StepResult:
    loss: float
    color: float
    eikonal: float
    mask: float
    strategy: str
    lr: float
    surface_rays: int
    near_surface_eikonal: float = float("nan")


def compute_loss(state: TrainState, batch: RayBatch, weights: LossWeights, strategy: str, rng=None,
                 with_grads: bool = True, samples=None):
    """Render ``batch`` and return ``(terms, grads, samples)``.

    ``terms`` = (total, color, eikonal, mask); ``grads`` maps every trainable
    tensor name (plus ``log_inv_s``) to its gradient. ``samples`` may be given
    to evaluate the loss at fixed sample depths (gradient checks).
    """
    fld = state.field
    if samples is None:
        scfg = state.sampling_config(strategy)
        samples = sample_rays(batch.origins, batch.dirs, scfg, rng,
                              intervals=(batch.t_in, batch.t_out, batch.hit),
                              cache=state.cache if strategy == "hybrid" else None, sdf_fn=fld.sdf_value)
    rows = np.flatnonzero(samples.valid)
    zero = {k: np.zeros_like(v) for k, v in state.trainable().items()}
    if len(rows) == 0:
        return (0.0, 0.0, 0.0, 0.0), zero, samples
    sub = batch.subset(rows)
    inv_s = state.inv_s
    out, grad_pts, cache = render_rays(fld, inv_s, sub.origins, sub.dirs, samples.t[rows], sub.image_idx)
    fg = ~sub.sky
    free = sub.sky & sub.hit  # free-space supervision only where the envelope is crossed
    lc, gc_fg = color_loss(out.color[fg], sub.colors[fg].astype(out.color.dtype))
    le, ge = eikonal_loss(grad_pts)
    lm, gm_sky = mask_loss(out.opacity[free])
    total = weights.color * lc + weights.eikonal * le + weights.mask * lm
    terms = (float(total), lc, le, lm)
    if not with_grads:
        return terms, None, samples
    g_color = np.zeros_like(out.color)
    g_color[fg] = weights.color * gc_fg
    g_opacity = np.zeros(len(sub), dtype=np.float64)
    g_opacity[free] = weights.mask * gm_sky
    grads, g_inv_s = render_backward(fld, cache, g_color, g_opacity, None, weights.eikonal * ge)
    grads["log_inv_s"] = np.array([g_inv_s * inv_s])
    return terms, grads, samples


def train_step(state: TrainState, batch: RayBatch, weights: LossWeights | None = None, samples=None) -> StepResult:
    """One optimiser update; ``samples`` pins the sample depths (otherwise drawn per the schedule)."""
    cfg = state.config
    weights = weights or LossWeights(cfg.lambda_color, cfg.lambda_eik, cfg.lambda_mask)
    it = state.iteration
    strategy = strategy_at(cfg, it)
    if strategy == "hybrid":
        state.cache.refresh(state.field.sdf_value, it, force=(it == cfg.bootstrap_iters or not state.cache.has_values))
    terms, grads, samples = compute_loss(state, batch, weights, strategy, state.rng, samples=samples)
    if not (np.isfinite(terms[0]) and all(np.all(np.isfinite(g)) for g in grads.values())):
        path = _dump_batch(state, batch)
        raise NumericalError(f"non-finite loss/gradient at iteration {it}; offending batch written to {path}")
    lr = learning_rate(cfg, it)
    state.optimizer.step(state.trainable(), grads, lr)
    state.iteration += 1
    n_surf = int(np.sum(np.any(samples.stage == 1, axis=1)))
    return StepResult(terms[0], terms[1], terms[2], terms[3], strategy, lr, n_surf)


def _dump_batch(state: TrainState, batch: RayBatch) -> Path:
    d = state.dump_dir or Path(tempfile.gettempdir())
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"bad_batch_{state.iteration:07d}.npz"
    np.savez(path, **{f: getattr(batch, f) for f in batch.__dataclass_fields__}, iteration=state.iteration)
    return path


# ---------------------------------------------------------------------- driver
class Trainer:
    """Runs the schedule on a scene, writing checkpoints, ``log.csv`` and ``timing.csv``."""

    def __init__(self, scene: Scene, out_dir, config: SceneConfig | None = None, dtype=np.float32):
        self.scene = scene
        self.config = config or scene.config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.grid = scene_envelope(scene, self.config)
        self.pool = RayPool.from_scene(scene, self.grid)
        self.state = init_state(self.config, self.grid, len(scene.images), dtype, self.out_dir)
        self.weights = LossWeights(self.config.lambda_color, self.config.lambda_eik, self.config.lambda_mask)
        log.info("ray pool: %d rays (kept fraction %.3f), %d voxels, %d cache leaves", len(self.pool),
                 self.pool.kept_fraction, len(self.grid), len(self.state.cache.tree))

    def checkpoint(self, name: str | None = None) -> Path:
        st = self.state
        path = self.out_dir / (name or f"ckpt_{st.iteration:07d}.npz")
        save_checkpoint(path, st.field, st.iteration, self.config.to_dict(),
                        {"log_inv_s": st.log_inv_s, "grid_keys": self.grid.keys, "grid_origin": self.grid.origin,
                         "grid_voxel_size": np.array(self.grid.voxel_size)})
        return path

    def fork(self, out_dir, strategy: str | None = None) -> "Trainer":
        """Independent copy of the current training state, optionally switching the sampling strategy."""
        other = copy.copy(self)
        other.out_dir = Path(out_dir)
        other.out_dir.mkdir(parents=True, exist_ok=True)
        other.state = copy.deepcopy(self.state)
        if strategy is not None:
            other.config = self.config.replace(strategy=strategy)
            other.state.config = other.config
        other.state.dump_dir = other.out_dir
        return other

    def run(self, iterations: int | None = None, callback=None) -> list[StepResult]:
        cfg = self.config
        n = cfg.total_iters if iterations is None else int(iterations)
        st = self.state
        results = []
        log_path = self.out_dir / "log.csv"
        timing_path = self.out_dir / "timing.csv"
        fresh = st.iteration == 0 or not log_path.exists()
        with open(log_path, "w" if fresh else "a", newline="") as lf, \
                open(timing_path, "w" if fresh else "a", newline="") as tf:
            lw, tw = csv.writer(lf), csv.writer(tf)
            if fresh:
                lw.writerow(LOG_FIELDS)
                tw.writerow(["iteration", "wall_seconds"])
                self.checkpoint()
            t0 = time.perf_counter()
            for _ in range(n):
                batch = make_batch(self.pool, cfg.batch_size, st.rng)
                res = train_step(st, batch, self.weights)
                results.append(res)
                lw.writerow([st.iteration, repr(res.loss), repr(res.color), repr(res.eikonal), repr(res.mask),
                             repr(st.inv_s), repr(res.lr), repr(self.pool.kept_fraction), res.strategy,
                             res.surface_rays])
                tw.writerow([st.iteration, f"{time.perf_counter() - t0:.3f}"])
                if cfg.checkpoint_every and st.iteration % cfg.checkpoint_every == 0:
                    lf.flush()
                    self.checkpoint()
                if callback is not None:
                    callback(self, res)
        if n and not (cfg.checkpoint_every and st.iteration % cfg.checkpoint_every == 0):
            self.checkpoint()
        return results
