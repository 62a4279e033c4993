"""Synthetic scenes with analytic geometry, used as self-contained fixtures.

A scene directory holds COLMAP-text cameras/images/points3D, Lambertian
renders with a per-image color tint, sky masks from the analytic silhouette,
a dense ground-truth point cloud (``gt_points.ply``) and a ``config.json``
sized for desk-scale training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SceneConfig
from .geometry import dilate, ray_aabb_batch, voxelize_points
from .ply import save_ply
from .scene_io import Camera, ImageRecord, SfmPoint, write_colmap_scene, write_image, write_mask

log = logging.getLogger(__name__)

SHAPES = ("sphere", "box", "two-spheres")
LIGHT = np.array([0.4, -0.5, 0.77]) / np.linalg.norm([0.4, -0.5, 0.77])
SKY_COLOR = np.array([0.75, 0.82, 0.95])
GROUND_COLOR = np.array([0.35, 0.3, 0.25])


def _sphere_hit(o, d, center, radius):
    oc = o - center
    b = np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    t = np.where(t > 0, t, -b + sq)
    return np.where(ok & (t > 0), t, np.inf)


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5

    def sdf(self, p):
        return np.linalg.norm(np.asarray(p) - self.center, axis=-1) - self.radius

    def intersect(self, o, d):
        return _sphere_hit(o, d, np.asarray(self.center), self.radius)

    def normal(self, p):
        n = np.asarray(p) - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def sample_surface(self, n, rng):
        v = rng.normal(size=(n, 3))
        return np.asarray(self.center) + self.radius * v / np.linalg.norm(v, axis=1, keepdims=True)

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius


@dataclass(frozen=True)
class Box:
    half: tuple = (0.4, 0.3, 0.25)

    def sdf(self, p):
        q = np.abs(np.asarray(p)) - self.half
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    def intersect(self, o, d):
        h = np.asarray(self.half)
        t_in, _, hit = ray_aabb_batch(o, d, -h, h)
        return np.where(hit & (t_in > 0), t_in, np.inf)

    def normal(self, p):
        q = np.abs(np.asarray(p)) / np.asarray(self.half)
        axis = np.argmax(q, axis=-1)
        n = np.zeros(np.shape(p))
        np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(np.asarray(p), axis[..., None], -1)), -1)
        return n

    def sample_surface(self, n, rng):
        h = np.asarray(self.half)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        p = rng.uniform(-1, 1, (n, 3)) * h
        ax = face % 3
        p[np.arange(n), ax] = np.where(face < 3, 1.0, -1.0) * h[ax]
        return p

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half))


@dataclass(frozen=True)
class TwoSpheres:
    a: Sphere = Sphere((-0.28, 0.0, 0.0), 0.3)
    b: Sphere = Sphere((0.28, 0.0, 0.05), 0.25)

    def sdf(self, p):
        return np.minimum(self.a.sdf(p), self.b.sdf(p))

    def intersect(self, o, d):
        return np.minimum(self.a.intersect(o, d), self.b.intersect(o, d))

    def normal(self, p):
        na, nb = self.a.normal(p), self.b.normal(p)
        return np.where((self.a.sdf(p) <= self.b.sdf(p))[..., None], na, nb)

    def sample_surface(self, n, rng):
        wa, wb = self.a.radius ** 2, self.b.radius ** 2
        out = []
        need = n
        while need > 0:
            k = max(2 * need, 64)
            na = rng.binomial(k, wa / (wa + wb))
            p = np.concatenate([self.a.sample_surface(na, rng), self.b.sample_surface(k - na, rng)])
            p = p[np.abs(self.sdf(p)) < 1e-9]  # drop points buried inside the other sphere
            out.append(p[:need])
            need -= len(out[-1])
        return np.concatenate(out)

    @property
    def bounding_radius(self) -> float:
        return max(self.a.bounding_radius, self.b.bounding_radius)


def make_shape(name: str):
    if name == "sphere":
        return Sphere()
    if name == "box":
        return Box()
    if name == "two-spheres":
        return TwoSpheres()
    raise ValueError(f"unknown shape {name!r}; expected one of {SHAPES}")


def albedo(p):
    """Smooth procedural surface color, so that views carry texture as well as shading."""
    p = np.asarray(p)
    phase = np.array([0.3, 1.7, 2.9])
    s = np.sin(7.0 * p[..., :1] + phase) * np.sin(6.0 * p[..., 1:2] + 2 * phase) * np.sin(5.0 * p[..., 2:3] + phase)
    return 0.55 + 0.35 * s


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation (x right, y down, z forward)."""
    fwd = np.asarray(target, float) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    return np.stack([right, np.cross(fwd, right), fwd])


def orbit_cameras(n_views: int, resolution: int, distance: float, fov_deg: float = 50.0,
                  elevations=(-30.0, 60.0)) -> list[Camera]:
    """Cameras on a golden-angle orbit around the origin, all looking at it."""
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for k in range(n_views):
        el = np.radians(np.interp(k, [0, max(n_views - 1, 1)], elevations))
        az = k * golden
        c = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R = look_at(c)
        cams.append(Camera(resolution, resolution, f, f, resolution / 2, resolution / 2, R, -R @ c))
    return cams


def render_view(shape, cam: Camera, tint, sky_fraction: float):
    """Returns ``(pixels, sky mask, hit mask)`` for pixel-center rays."""
    h, w = cam.height, cam.width
    vv, uu = np.mgrid[0:h, 0:w]
    o, d = cam.rays(uu.ravel() + 0.5, vv.ravel() + 0.5)
    t = shape.intersect(o, d)
    hit = np.isfinite(t)
    img = np.empty((h * w, 3))
    p = o[hit] + t[hit, None] * d[hit]
    shade = 0.25 + 0.75 * np.clip(shape.normal(p) @ LIGHT, 0.0, None)
    img[hit] = albedo(p) * shade[:, None]
    upper = (vv.ravel() < sky_fraction * h)
    img[~hit] = np.where(upper[~hit, None], SKY_COLOR, GROUND_COLOR)
    img = np.clip(img * tint, 0.0, 1.0)
    sky = ~hit & upper
    return img.reshape(h, w, 3), sky.reshape(h, w), hit.reshape(h, w)


def _visible(shape, cams, p, n):
    """``(n_points, n_views)`` visibility: facing, inside the frame, unoccluded."""
    vis = np.zeros((len(p), len(cams)), dtype=bool)
    uvs = []
    for j, cam in enumerate(cams):
        c = cam.center
        to_cam = c - p
        dist = np.linalg.norm(to_cam, axis=1)
        uv, z = cam.project(p)
        inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        facing = np.sum(to_cam * n, axis=1) > 1e-6 * dist
        d = -to_cam / dist[:, None]
        first = shape.intersect(np.broadcast_to(c, p.shape), d)
        vis[:, j] = inside & facing & (np.abs(first - dist) < 1e-6 * (1.0 + dist))
        uvs.append(uv)
    return vis, uvs


def desk_config(grid_points, **overrides) -> SceneConfig:
    """Small networks and short schedules; sphere-sampling bounds circumscribe the voxel envelope."""
    base = dict(voxel_size=0.05, octree_depth=5, dilation_radius=1,
                geometry_layers=4, geometry_width=64, geometry_skip=2, color_layers=3, color_width=64,
                pos_freqs=6, dir_freqs=4, embedding_dim=8,
                bootstrap_iters=500, total_iters=3500, batch_size=128, refresh_period=250,
                lr=2e-3, checkpoint_every=500, cells_per_voxel=8, eval_density=2e4)
    base.update(overrides)
    grid = dilate(voxelize_points(grid_points, base["voxel_size"]), base["dilation_radius"])
    b = grid.bounds()
    base.setdefault("sphere_center", tuple(float(x) for x in 0.5 * (b.lo + b.hi)))
    base.setdefault("sphere_radius", float(0.5 * np.linalg.norm(b.hi - b.lo)))
    return SceneConfig(**base)


def synthesize(out_dir, shape: str = "sphere", n_views: int = 16, resolution: int = 64, tint: float = 0.1,
               sky_fraction: float = 1.0, seed: int = 0, n_points: int = 3000, n_gt: int = 40000,
               distance_factor: float = 3.2, **config_overrides) -> Path:
    """Write a complete synthetic scene to ``out_dir`` and return its path."""
    if n_views < 2:
        raise ValueError("need at least two views")
    if not 0.0 <= sky_fraction <= 1.0:
        raise ValueError("sky fraction must lie in [0, 1]")
    geo = make_shape(shape)
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    cams = orbit_cameras(n_views, resolution, distance_factor * geo.bounding_radius)
    tints = 1.0 + tint * rng.uniform(-1.0, 1.0, (n_views, 3))

    pts = geo.sample_surface(n_points, rng)
    vis, uvs = _visible(geo, cams, pts, geo.normal(pts))
    keep = vis.sum(axis=1) >= 2
    if not keep.any():
        raise ValueError("no surface point is seen by two views; use more views or a wider orbit")
    pts, vis = pts[keep], vis[keep]
    obs = [[] for _ in cams]
    points = []
    for i, p in enumerate(pts):
        track = []
        for j in np.flatnonzero(vis[i]):
            track.append((j + 1, len(obs[j])))
            obs[j].append((uvs[j][np.flatnonzero(keep)[i]], i + 1))
        points.append(SfmPoint(i + 1, p, len(track), float(rng.uniform(0.1, 1.0)), albedo(p), track))

    records = []
    for j, cam in enumerate(cams):
        name = f"view_{j:03d}.png"
        img, sky, _ = render_view(geo, cam, tints[j], sky_fraction)
        write_image(out / "images" / name, img)
        write_mask(out / "masks" / f"view_{j:03d}_sky.png", sky)
        uv = np.array([o[0] for o in obs[j]]).reshape(-1, 2)
        ids = np.array([o[1] for o in obs[j]], dtype=np.int64)
        records.append(ImageRecord(j + 1, name, cam, j, uv, ids))
    write_colmap_scene(out / "sparse", records, points)

    gt = geo.sample_surface(n_gt, np.random.default_rng(seed + 1))
    save_ply(out / "gt_points.ply", gt, normals=geo.normal(gt))
    cfg = desk_config(pts, seed=seed, **config_overrides)
    cfg.save(out / "config.json")
    log.info("synthesized %s scene: %d views, %d SfM points -> %s", shape, n_views, len(points), out)
    return out
