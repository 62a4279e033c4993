"""Scene configuration, stored as one flat JSON document."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

STRATEGIES = ("sphere", "voxel", "hybrid")


@dataclass
class SceneConfig:
    # sparse envelope and cache
    voxel_size: float = 1.0
    octree_depth: int = 10
    dilation_radius: int = 1
    t_s: Optional[float] = None
    # sampling
    strategy: str = "hybrid"
    n_v: int = 8
    n_s: int = 8
    sphere_radius: float = 1.0
    sphere_center: tuple = (0.0, 0.0, 0.0)
    importance_sharpness: float = 64.0
    # SfM point filtering (not from the method description; conservative defaults)
    min_track_len: int = 3
    max_reproj: float = 1.5
    # networks
    geometry_layers: int = 8
    geometry_width: int = 512
    geometry_skip: Optional[int] = 4
    color_layers: int = 4
    color_width: int = 256
    pos_freqs: int = 10
    dir_freqs: int = 4
    color_pos_freqs: int = 0
    embedding_dim: int = 48
    softplus_beta: float = 100.0
    init_radius_factor: float = 0.5
    init_inv_s_factor: float = 20.0
    # losses
    lambda_color: float = 1.0
    lambda_eik: float = 0.1
    lambda_mask: float = 0.01
    # schedule
    bootstrap_iters: int = 5000
    total_iters: int = 300000
    batch_size: int = 1024
    refresh_period: int = 2000
    lr: float = 5e-4
    lr_final_ratio: float = 0.05
    warmup_iters: int = 0
    checkpoint_every: int = 5000
    seed: int = 0
    # meshing / evaluation
    cells_per_voxel: int = 8
    eval_density: float = 1e4
    # paths, relative to the scene root
    sparse_dir: str = "sparse"
    images_dir: str = "images"
    masks_dir: str = "masks"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.octree_depth < 1:
            raise ValueError("octree_depth must be >= 1")
        if self.n_v < 1 or self.n_s < 1:
            raise ValueError("n_v and n_s must be >= 1")
        if self.bootstrap_iters > self.total_iters:
            raise ValueError("bootstrap_iters must not exceed total_iters")
        if self.t_s is not None and self.t_s <= 0:
            raise ValueError("t_s must be positive")
        self.sphere_center = tuple(float(c) for c in self.sphere_center)

    @property
    def sampling_radius(self) -> float:
        """Surface-guided half window: ``16 / 2^depth`` voxel sizes unless overridden."""
        if self.t_s is not None:
            return float(self.t_s)
        return 16.0 / (1 << self.octree_depth) * self.voxel_size

    @property
    def samples_per_ray(self) -> int:
        return self.n_v + 2 * self.n_s

    def replace(self, **changes) -> "SceneConfig":
        d = asdict(self)
        d.update(changes)
        return SceneConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sphere_center"] = list(self.sphere_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SceneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
