"""Scene ingestion: COLMAP text models, images and masks, camera rays.

Scene directory layout::

    <root>/sparse/{cameras,images,points3D}.txt
    <root>/images/<name>.png
    <root>/masks/<stem>_transient.png   (optional, nonzero = drop pixel)
    <root>/masks/<stem>_sky.png         (optional, nonzero = free space)
    <root>/config.json                  (optional)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SceneConfig
from .geometry import Ray

log = logging.getLogger(__name__)

SUPPORTED_MODELS = ("SIMPLE_PINHOLE", "PINHOLE")


class SceneFormatError(ValueError):
    pass


def qvec_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = np.array([
        [Rxx - Ryy - Rzz, 0, 0, 0],
        [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
        [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
        [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    return -q if q[0] < 0 else q


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera coordinates."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6:
            raise ValueError("rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def project(self, points):
        """World points -> (pixel coordinates ``(N, 2)``, camera-space depth ``(N,)``)."""
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def rays(self, u, v):
        """Batched pixel rays: returns ``(origins, unit directions)`` of shape ``(N, 3)``."""
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        dc = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=1)
        d = dc @ self.rotation  # R^T applied row-wise
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.center, d.shape).copy(), d


def pixel_ray(camera: Camera, u: float, v: float) -> Ray:
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside a {camera.width}x{camera.height} image")
    o, d = camera.rays([u], [v])
    return Ray(o[0], d[0])


@dataclass
class ImageRecord:
    id: int
    name: str
    camera: Camera
    index: int
    points2d: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pixels: np.ndarray | None = None
    transient: np.ndarray | None = None
    sky: np.ndarray | None = None

    def attach(self, pixels, transient=None, sky=None) -> None:
        h, w = self.camera.height, self.camera.width
        if pixels.shape[:2] != (h, w):
            raise SceneFormatError(f"image {self.name}: pixels {pixels.shape[:2]} != camera {(h, w)}")
        self.pixels = pixels
        self.transient = np.zeros((h, w), bool) if transient is None else transient
        self.sky = np.zeros((h, w), bool) if sky is None else sky
        for nm, m in (("transient", self.transient), ("sky", self.sky)):
            if m.shape != (h, w):
                raise SceneFormatError(f"image {self.name}: {nm} mask shape {m.shape} != {(h, w)}")


@dataclass
class SfmPoint:
    id: int
    position: np.ndarray
    track_length: int
    reprojection_error: float
    color: np.ndarray
    track: list = field(default_factory=list)

    def __post_init__(self):
        if self.track_length < 2:
            raise ValueError(f"SfM point {self.id} has track length {self.track_length} < 2")
        if self.reprojection_error < 0:
            raise ValueError("reprojection error must be non-negative")


def _data_lines(path: Path):
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield no, s


def load_colmap_scene(directory):
    """Read ``cameras.txt``, ``images.txt`` and ``points3D.txt``.

    Returns ``(images, points)``: a list of :class:`ImageRecord` sorted by id
    (appearance index = position in that list) and a list of :class:`SfmPoint`.
    """
    d = Path(directory)
    intr = {}
    for no, s in _data_lines(d / "cameras.txt"):
        el = s.split()
        try:
            cid, model, w, h = int(el[0]), el[1], int(el[2]), int(el[3])
            params = [float(x) for x in el[4:]]
        except (IndexError, ValueError) as e:
            raise SceneFormatError(f"cameras.txt line {no}: malformed ({e})") from None
        if model not in SUPPORTED_MODELS:
            raise SceneFormatError(f"cameras.txt line {no}: unsupported camera model {model!r} "
                                   f"(supported: {', '.join(SUPPORTED_MODELS)})")
        want = 3 if model == "SIMPLE_PINHOLE" else 4
        if len(params) != want:
            raise SceneFormatError(f"cameras.txt line {no}: {model} needs {want} parameters")
        if model == "SIMPLE_PINHOLE":
            f, cx, cy = params
            params = [f, f, cx, cy]
        intr[cid] = (w, h, *params)

    images = []
    lines = list(_data_lines(d / "images.txt"))
    i = 0
    while i < len(lines):
        no, s = lines[i]
        el = s.split()
        try:
            iid = int(el[0])
            q = [float(x) for x in el[1:5]]
            t = [float(x) for x in el[5:8]]
            cid = int(el[8])
            name = el[9]
        except (IndexError, ValueError) as e:
            raise SceneFormatError(f"images.txt line {no}: malformed ({e})") from None
        if cid not in intr:
            raise SceneFormatError(f"images.txt line {no}: unknown camera id {cid}")
        pts2d = np.zeros((0, 2))
        ids = np.zeros(0, dtype=np.int64)
        # the observation line may be empty, in which case _data_lines skipped it
        if i + 1 < len(lines) and lines[i + 1][0] == no + 1:
            no2, s2 = lines[i + 1]
            el2 = s2.split()
            if len(el2) % 3:
                raise SceneFormatError(f"images.txt line {no2}: POINTS2D needs triples")
            try:
                arr = np.array(el2, dtype=np.float64).reshape(-1, 3)
            except ValueError as e:
                raise SceneFormatError(f"images.txt line {no2}: malformed ({e})") from None
            pts2d, ids = arr[:, :2], arr[:, 2].astype(np.int64)
            i += 1
        i += 1
        w, h, fx, fy, cx, cy = intr[cid]
        cam = Camera(w, h, fx, fy, cx, cy, qvec_to_rotmat(q), np.array(t))
        images.append(ImageRecord(iid, name, cam, -1, pts2d, ids))
    images.sort(key=lambda r: r.id)
    for k, rec in enumerate(images):
        rec.index = k

    points = []
    for no, s in _data_lines(d / "points3D.txt"):
        el = s.split()
        try:
            pid = int(el[0])
            xyz = np.array([float(x) for x in el[1:4]])
            rgb = np.array([int(x) for x in el[4:7]]) / 255.0
            err = float(el[7])
            tr = [int(x) for x in el[8:]]
        except (IndexError, ValueError) as e:
            raise SceneFormatError(f"points3D.txt line {no}: malformed ({e})") from None
        if len(tr) % 2:
            raise SceneFormatError(f"points3D.txt line {no}: TRACK needs (image, point2d) pairs")
        track = list(zip(tr[0::2], tr[1::2]))
        try:
            points.append(SfmPoint(pid, xyz, len(track), err, rgb, track))
        except ValueError as e:
            raise SceneFormatError(f"points3D.txt line {no}: {e}") from None
    return images, points


def write_colmap_scene(directory, images, points) -> None:
    """Write a PINHOLE-only text model (one camera entry per image)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for rec in images:
            c = rec.camera
            fh.write(f"{rec.id} PINHOLE {c.width} {c.height} {float(c.fx)!r} {float(c.fy)!r} {float(c.cx)!r} {float(c.cy)!r}\n")
    with open(d / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for rec in images:
            c = rec.camera
            q = rotmat_to_qvec(c.rotation)
            fh.write(" ".join([str(rec.id), *(repr(float(x)) for x in q), *(repr(float(x)) for x in c.translation),
                               str(rec.id), rec.name]) + "\n")
            fh.write(" ".join(f"{x!r} {y!r} {int(p)}" for (x, y), p in zip(rec.points2d.tolist(), rec.point3d_ids))
                     + "\n")
    with open(d / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for p in points:
            rgb = np.clip(np.round(np.asarray(p.color) * 255), 0, 255).astype(int)
            tr = " ".join(f"{a} {b}" for a, b in p.track)
            x, y, z = (float(c) for c in p.position)
            fh.write(f"{p.id} {x!r} {y!r} {z!r} {rgb[0]} {rgb[1]} {rgb[2]} {float(p.reprojection_error)!r} {tr}\n")


def filter_sfm_points(points, min_track_len: int = 3, max_reproj: float = 1.5):
    """Keep points with ``track_length >= min_track_len`` and ``error <= max_reproj``."""
    if min_track_len <= 0 or max_reproj <= 0:
        raise ValueError("filter thresholds must be positive")
    return [p for p in points if p.track_length >= min_track_len and p.reprojection_error <= max_reproj]


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_image(path, pixels) -> None:
    Image.fromarray(np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)).save(path)


def write_mask(path, mask) -> None:
    Image.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8), mode="L").save(path)


@dataclass
class Scene:
    root: Path
    config: SceneConfig
    images: list
    points: list

    @property
    def point_positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points]).reshape(-1, 3)


def load_scene(root, config: SceneConfig | None = None, with_pixels: bool = True) -> Scene:
    root = Path(root)
    if config is None:
        cfg_path = root / "config.json"
        config = SceneConfig.load(cfg_path) if cfg_path.exists() else SceneConfig()
    images, points = load_colmap_scene(root / config.sparse_dir)
    if with_pixels:
        for rec in images:
            stem = Path(rec.name).stem
            px = read_image(root / config.images_dir / rec.name)
            mdir = root / config.masks_dir
            tr = mdir / f"{stem}_transient.png"
            sk = mdir / f"{stem}_sky.png"
            rec.attach(px, read_mask(tr) if tr.exists() else None, read_mask(sk) if sk.exists() else None)
    log.info("loaded %d images and %d SfM points from %s", len(images), len(points), root)
    return Scene(root, config, images, points)
