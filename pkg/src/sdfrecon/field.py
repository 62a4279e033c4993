"""Neural scene representation: SDF network, appearance-conditioned color network.

The geometry MLP is evaluated together with three forward-mode tangents (one
per input axis), which yields the spatial gradient of the SDF exactly. The
reverse pass runs through that augmented graph, so losses that depend on the
gradient (eikonal term, normal input of the color head) get exact parameter
gradients without a generic autodiff engine.

Inputs are normalised as ``x_n = (x - center) / scale`` and the SDF is scaled
back, ``d = scale * d_n``, so the gradient with respect to world coordinates
equals the gradient of ``d_n`` with respect to ``x_n``.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = "SDFRECON-CKPT-1"
_SQRT_HALF = float(np.sqrt(0.5))  # python float: keeps single-precision arrays single


@dataclass(frozen=True)
class EncodingConfig:
    n_freqs: int
    include_identity: bool = True

    def __post_init__(self):
        if self.n_freqs < 0:
            raise ValueError("frequency count must be >= 0")

    @property
    def dim(self) -> int:
        return 3 * int(self.include_identity) + 6 * self.n_freqs


@dataclass(frozen=True)
class MlpSpec:
    layers: int
    width: int
    out_dim: int
    activation: str = "softplus"
    skip: int | None = None

    def __post_init__(self):
        if self.layers < 1 or self.width < 1:
            raise ValueError("MLP needs at least one layer of width >= 1")
        if self.activation not in ("softplus", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


def encode(p, cfg: EncodingConfig) -> np.ndarray:
    """``[p, sin(2^k pi p), cos(2^k pi p)]`` for ``k < n_freqs``, last axis concatenated."""
    return _encode(np.asarray(p), cfg, jacobian=False)[0]


def _encode(p, cfg: EncodingConfig, jacobian: bool):
    parts = [p] if cfg.include_identity else []
    jac = [np.broadcast_to(np.eye(3, dtype=p.dtype)[:, None, :], (3, len(p), 3))] if cfg.include_identity else []
    for k in range(cfg.n_freqs):
        f = (2.0 ** k) * np.pi
        s, c = np.sin(f * p), np.cos(f * p)
        parts += [s, c]
        if jacobian:
            # d/dp_j of sin(f p_i) is f cos(f p_i) delta_ij
            eye = np.eye(3, dtype=p.dtype)[:, None, :]
            jac += [eye * (f * c)[None], eye * (-f * s)[None]]
    enc = np.concatenate(parts, axis=-1) if parts else np.zeros(p.shape[:-1] + (0,), p.dtype)
    if not jacobian:
        return enc, None
    return enc, np.concatenate(jac, axis=-1)


def _activation(z, kind: str, beta: float, second: bool):
    if kind == "relu":
        s1 = (z > 0).astype(z.dtype)
        return np.maximum(z, 0), s1, (np.zeros_like(z) if second else None)
    bz = z * z.dtype.type(beta)
    # in single precision exp(-30) is already below resolution; the clamp keeps exp() off its slow underflow path
    lim = z.dtype.type(30.0 if z.dtype == np.float32 else 700.0)
    e = np.exp(-np.minimum(np.abs(bz), lim))
    val = (np.maximum(bz, 0) + np.log1p(e)) / z.dtype.type(beta)
    s1 = 0.5 + 0.5 * np.tanh(0.5 * bz)
    s2 = beta * s1 * (1.0 - s1) if second else None
    return val, s1, s2


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class FieldOutput:
    sdf: np.ndarray
    color: np.ndarray | None
    grad: np.ndarray


class NeuralField:
    """Geometry MLP ``d(x)``, color MLP ``c(x, v, e_i)`` and the appearance table."""

    def __init__(self, geometry: MlpSpec, color: MlpSpec, pos_enc: EncodingConfig, dir_enc: EncodingConfig,
                 color_pos_enc: EncodingConfig, n_images: int, embedding_dim: int, center=(0.0, 0.0, 0.0),
                 scale: float = 1.0, beta: float = 100.0, init_radius: float = 0.5, seed: int = 0,
                 dtype=np.float64):
        if geometry.out_dim < 1:
            raise ValueError("geometry output must include the SDF channel")
        self.geometry, self.color_spec = geometry, color
        self.pos_enc, self.dir_enc, self.color_pos_enc = pos_enc, dir_enc, color_pos_enc
        self.n_images, self.embedding_dim = int(n_images), int(embedding_dim)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.scale = float(scale)
        self.beta = float(beta)
        self.init_radius = float(init_radius)
        self.dtype = np.dtype(dtype)
        self.params = self._init_params(np.random.default_rng(seed))

    @classmethod
    def from_config(cls, cfg, n_images: int, center, scale: float, seed: int | None = None, dtype=np.float32):
        skip = cfg.geometry_skip if cfg.geometry_skip is not None and 0 < cfg.geometry_skip < cfg.geometry_layers else None
        return cls(
            MlpSpec(cfg.geometry_layers, cfg.geometry_width, 1 + cfg.geometry_width, "softplus", skip),
            MlpSpec(cfg.color_layers, cfg.color_width, 3, "softplus"),
            EncodingConfig(cfg.pos_freqs), EncodingConfig(cfg.dir_freqs), EncodingConfig(cfg.color_pos_freqs),
            n_images, cfg.embedding_dim, center, scale, cfg.softplus_beta, cfg.init_radius_factor,
            cfg.seed if seed is None else seed, dtype,
        )

    # ------------------------------------------------------------------ init
    @property
    def feature_dim(self) -> int:
        return self.geometry.out_dim - 1

    @property
    def color_in_dim(self) -> int:
        return self.color_pos_enc.dim + self.dir_enc.dim + 3 + self.feature_dim + self.embedding_dim

    def _geo_in_dims(self):
        g, e = self.geometry, self.pos_enc.dim
        dims = []
        for layer in range(g.layers):
            d_in = e if layer == 0 else g.width
            if g.skip is not None and layer == g.skip:
                d_in += e
            dims.append(d_in)
        return dims

    def _init_params(self, rng):
        """Geometric initialisation: the SDF starts close to a sphere of radius ``init_radius`` (normalised units)."""
        g, P = self.geometry, {}
        e = self.pos_enc.dim
        ident = 3 if self.pos_enc.include_identity else 0
        for layer, d_in in enumerate(self._geo_in_dims()):
            W = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(g.width), (d_in, g.width))
            if layer == 0 and e > ident:
                W[ident:, :] = 0.0
            if g.skip is not None and layer == g.skip:
                W[d_in - e + ident:, :] = 0.0
            P[f"geo.W{layer}"] = W
            P[f"geo.b{layer}"] = np.zeros(g.width)
        Wo = rng.normal(0.0, 1e-4, (g.width, g.out_dim))
        Wo[:, 0] = rng.normal(np.sqrt(np.pi) / np.sqrt(g.width), 1e-4, g.width)
        bo = np.zeros(g.out_dim)
        bo[0] = -self.init_radius
        P["geo.Wout"], P["geo.bout"] = Wo, bo

        c = self.color_spec
        d_in = self.color_in_dim
        for layer in range(c.layers):
            P[f"col.W{layer}"] = rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, c.width))
            P[f"col.b{layer}"] = np.zeros(c.width)
            d_in = c.width
        P["col.Wout"] = rng.normal(0.0, np.sqrt(1.0 / d_in), (d_in, c.out_dim))
        P["col.bout"] = np.zeros(c.out_dim)
        P["embed"] = np.zeros((self.n_images, self.embedding_dim))
        return {k: v.astype(self.dtype) for k, v in P.items()}

    def astype(self, dtype) -> "NeuralField":
        self.dtype = np.dtype(dtype)
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}
        return self

    # --------------------------------------------------------------- geometry
    def _normalise(self, x):
        return ((np.asarray(x, dtype=np.float64) - self.center) / self.scale).astype(self.dtype)

    def _geo_forward(self, x, tangents: bool):
        P, g = self.params, self.geometry
        xn = self._normalise(x)
        enc, denc = _encode(xn, self.pos_enc, jacobian=tangents)
        n = len(xn)
        h, th = enc, denc
        layers = []
        for layer in range(g.layers):
            if g.skip is not None and layer == g.skip:
                h = np.concatenate([h, enc], axis=1) * _SQRT_HALF
                if tangents:
                    th = np.concatenate([th, denc], axis=2) * _SQRT_HALF
            W, b = P[f"geo.W{layer}"], P[f"geo.b{layer}"]
            z = h @ W + b
            val, s1, s2 = _activation(z, g.activation, self.beta, tangents)
            if tangents:
                tz = (th.reshape(3 * n, -1) @ W).reshape(3, n, -1)
                layers.append((h, th, tz, s1, s2))
                th = tz * s1[None]
            else:
                layers.append((h, None, None, s1, None))
            h = val
        out = h @ P["geo.Wout"] + P["geo.bout"]
        d = out[:, 0] * self.scale
        feat = out[:, 1:]
        grad = (th @ P["geo.Wout"][:, 0]).T if tangents else None
        return d, feat, grad, (h, th, layers)

    def sdf(self, x):
        """SDF values ``(N,)`` and exact spatial gradients ``(N, 3)``."""
        x = np.atleast_2d(x)
        d, _, grad, _ = self._geo_forward(x, tangents=True)
        return d, grad

    def sdf_value(self, x, chunk: int = 65536) -> np.ndarray:
        """SDF values only (no tangents), evaluated in chunks."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(len(x), dtype=np.float64)
        for s in range(0, len(x), chunk):
            out[s:s + chunk] = self._geo_forward(x[s:s + chunk], tangents=False)[0]
        return out

    # ------------------------------------------------------------------ color
    def _color_forward(self, x, v, idx, grad, feat):
        P, c = self.params, self.color_spec
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        if np.any(idx < 0) or np.any(idx >= self.n_images):
            raise IndexError(f"appearance index out of range [0, {self.n_images})")
        xn = self._normalise(x)
        vv = np.asarray(v, dtype=self.dtype)
        if idx.size == 1 and len(xn) > 1:
            idx = np.full(len(xn), idx[0])
        h = np.concatenate([
            _encode(xn, self.color_pos_enc, False)[0],
            _encode(vv, self.dir_enc, False)[0],
            grad.astype(self.dtype, copy=False), feat, P["embed"][idx],
        ], axis=1)
        layers = []
        for layer in range(c.layers):
            z = h @ P[f"col.W{layer}"] + P[f"col.b{layer}"]
            val, s1, _ = _activation(z, c.activation, self.beta, False)
            layers.append((h, s1))
            h = val
        o = h @ P["col.Wout"] + P["col.bout"]
        rgb = _sigmoid(o).astype(self.dtype)
        return rgb, (h, layers, rgb, idx)

    def color(self, x, v, idx) -> np.ndarray:
        """Colors in ``[0, 1]^3`` for points ``x`` seen along unit directions ``v`` in image(s) ``idx``."""
        x = np.atleast_2d(x)
        _, feat, grad, _ = self._geo_forward(x, tangents=True)
        return self._color_forward(x, np.atleast_2d(v), idx, grad, feat)[0]

    # ---------------------------------------------------------------- forward
    def forward(self, x, v=None, idx=None, color_rows=None):
        """Evaluate SDF, gradient and (when ``v`` is given) color; returns ``(FieldOutput, cache)``.

        ``color_rows`` restricts the color head to a subset of the points; ``v``
        and ``idx`` then refer to that subset and ``FieldOutput.color`` has one
        row per selected point.
        """
        x = np.atleast_2d(x)
        d, feat, grad, gcache = self._geo_forward(x, tangents=True)
        rgb, ccache = (None, None)
        if v is not None:
            rows = np.arange(len(x)) if color_rows is None else np.asarray(color_rows, dtype=np.int64)
            if color_rows is not None and len(np.unique(rows)) != len(rows):
                raise ValueError("color_rows must be unique")
            rgb, ccache = self._color_forward(x[rows], np.atleast_2d(v), idx, grad[rows], feat[rows])
            ccache = ccache + (rows,)
        return FieldOutput(d, rgb, grad), (len(x), gcache, ccache)

    def backward(self, cache, g_sdf=None, g_grad=None, g_color=None) -> dict:
        """Vector-Jacobian product of the outputs of :meth:`forward` with the given cotangents.

        Returns a dict of parameter gradients (same keys as ``params``). Rows of
        the appearance table not used in the batch receive exactly zero.
        """
        n, (h_last, th_last, layers), ccache = cache
        P, g = self.params, self.geometry
        dt = self.dtype

        def _check(a, shape, name):
            if a is None:
                return np.zeros(shape, dt)
            a = np.asarray(a, dtype=dt)
            if a.shape != shape:
                raise ValueError(f"cotangent {name} has shape {a.shape}, expected {shape}")
            return a

        g_sdf = _check(g_sdf, (n,), "sdf")
        g_grad = _check(g_grad, (n, 3), "grad")
        grads = {k: np.zeros_like(v) for k, v in P.items()}
        g_feat = np.zeros((n, self.feature_dim), dt)

        if g_color is not None:
            if ccache is None:
                raise ValueError("color cotangent given but forward pass had no color")
            h, clayers, rgb, idx, rows = ccache
            g_color = _check(g_color, (len(rows), 3), "color")
            go = g_color * rgb * (1.0 - rgb)
            grads["col.Wout"] = h.T @ go
            grads["col.bout"] = go.sum(0)
            gh = go @ P["col.Wout"].T
            for layer in reversed(range(self.color_spec.layers)):
                hin, s1 = clayers[layer]
                gz = gh * s1
                grads[f"col.W{layer}"] = hin.T @ gz
                grads[f"col.b{layer}"] = gz.sum(0)
                gh = gz @ P[f"col.W{layer}"].T
            o = self.color_pos_enc.dim + self.dir_enc.dim
            g_grad = g_grad.copy()
            g_grad[rows] += gh[:, o:o + 3]
            g_feat[rows] += gh[:, o + 3:o + 3 + self.feature_dim]
            ge = gh[:, o + 3 + self.feature_dim:]
            np.add.at(grads["embed"], idx, ge)

        # geometry output layer: out = h Wout + bout, grad_j = th_j Wout[:, 0]
        Wo = P["geo.Wout"]
        g_out = np.concatenate([(g_sdf * self.scale)[:, None], g_feat], axis=1)
        gWo = h_last.T @ g_out
        gWo[:, 0] += np.einsum("jnk,nj->k", th_last, g_grad)
        grads["geo.Wout"] = gWo
        grads["geo.bout"] = g_out.sum(0)
        gh = g_out @ Wo.T
        gth = g_grad.T[:, :, None] * Wo[:, 0][None, None, :]

        width = g.width
        for layer in reversed(range(g.layers)):
            hin, thin, tz, s1, s2 = layers[layer]
            W = P[f"geo.W{layer}"]
            gz = gh * s1 + (gth[0] * tz[0] + gth[1] * tz[1] + gth[2] * tz[2]) * s2
            gtz = gth * s1[None]
            d_in = hin.shape[1]
            grads[f"geo.W{layer}"] = hin.T @ gz + thin.reshape(-1, d_in).T @ gtz.reshape(-1, width)
            grads[f"geo.b{layer}"] = gz.sum(0)
            if layer == 0:
                break
            gh = gz @ W.T
            gth = (gtz.reshape(-1, width) @ W.T).reshape(3, n, d_in)
            if g.skip is not None and layer == g.skip:
                # drop the encoding half of the concatenated input; undo the 1/sqrt(2)
                keep = width
                gh = gh[:, :keep] * _SQRT_HALF
                gth = gth[:, :, :keep] * _SQRT_HALF
        return grads

    # ------------------------------------------------------------ persistence
    def meta(self) -> dict:
        g, c = self.geometry, self.color_spec
        return {
            "geometry": [g.layers, g.width, g.out_dim, g.activation, g.skip],
            "color": [c.layers, c.width, c.out_dim, c.activation, c.skip],
            "pos_enc": [self.pos_enc.n_freqs, self.pos_enc.include_identity],
            "dir_enc": [self.dir_enc.n_freqs, self.dir_enc.include_identity],
            "color_pos_enc": [self.color_pos_enc.n_freqs, self.color_pos_enc.include_identity],
            "n_images": self.n_images, "embedding_dim": self.embedding_dim,
            "center": self.center.tolist(), "scale": self.scale, "beta": self.beta,
            "init_radius": self.init_radius, "dtype": self.dtype.str,
        }

    @classmethod
    def from_meta(cls, meta: dict, params: dict) -> "NeuralField":
        f = cls(MlpSpec(*meta["geometry"]), MlpSpec(*meta["color"]), EncodingConfig(*meta["pos_enc"]),
                EncodingConfig(*meta["dir_enc"]), EncodingConfig(*meta["color_pos_enc"]), meta["n_images"],
                meta["embedding_dim"], meta["center"], meta["scale"], meta["beta"], meta["init_radius"],
                dtype=np.dtype(meta["dtype"]))
        missing = set(f.params) - set(params)
        if missing:
            raise ValueError(f"checkpoint lacks tensors {sorted(missing)}")
        for k in f.params:
            if params[k].shape != f.params[k].shape:
                raise ValueError(f"tensor {k}: shape {params[k].shape} != {f.params[k].shape}")
            f.params[k] = np.asarray(params[k], dtype=f.dtype)
        return f


def save_checkpoint(path, field: NeuralField, iteration: int, config: dict, extra: dict | None = None) -> None:
    """Atomic write of a versioned ``.npz`` archive (``field.*`` and ``extra.*`` tensors plus JSON metadata)."""
    tensors = {f"field.{k}": v for k, v in field.params.items()}
    for k, v in (extra or {}).items():
        tensors[f"extra.{k}"] = np.asarray(v)
    meta = {"magic": CHECKPOINT_MAGIC, "iteration": int(iteration), "config": config, "field": field.meta(),
            "shapes": {k: list(v.shape) for k, v in tensors.items()}}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(field, iteration, config_dict, extra_tensors)``."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('magic')!r}")
        params = {k[6:]: z[k] for k in z.files if k.startswith("field.")}
        extra = {k[6:]: z[k] for k in z.files if k.startswith("extra.")}
    return NeuralField.from_meta(meta["field"], params), meta["iteration"], meta["config"], extra
