"""SDF-to-opacity conversion and front-to-back compositing along sampled rays.

For SDF readings ``d_0 .. d_n`` at ascending ray depths, section ``i`` gets

    alpha_i = clamp((Phi(d_{i-1}) - Phi(d_i)) / Phi(d_{i-1}), 0, 1)

with ``Phi`` the logistic CDF of sharpness ``inv_s``. The clamp makes the
construction occlusion aware: sections where the SDF increases (leaving a
surface) contribute nothing. Weights are ``w_i = alpha_i * prod_{j<i}(1 - alpha_j)``.

All functions work on batches of rays with a fixed number of samples each
(leading axis = ray).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def logistic_cdf(x, inv_s):
    """``1 / (1 + exp(-inv_s * x))`` without overflow for any finite argument."""
    z = np.asarray(inv_s) * np.asarray(x)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _raw_alphas(sdf, inv_s):
    phi = logistic_cdf(sdf, inv_s)
    prev, nxt = phi[..., :-1], phi[..., 1:]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        raw = np.where(prev > 0, (prev - nxt) / prev, 0.0)
    return raw, phi


def alphas_from_sdf(sdf, inv_s) -> np.ndarray:
    """Section opacities ``(..., n)`` from SDF values ``(..., n+1)``."""
    sdf = np.asarray(sdf)
    if sdf.shape[-1] < 2:
        raise ValueError("need at least two samples per ray")
    raw, _ = _raw_alphas(sdf, inv_s)
    return np.clip(raw, 0.0, 1.0)


def alphas_backward(sdf, inv_s, g_alpha):
    """Cotangents of :func:`alphas_from_sdf` w.r.t. the SDF values and the scalar ``inv_s``."""
    sdf = np.asarray(sdf)
    raw, phi = _raw_alphas(sdf, inv_s)
    live = (raw > 0) & (raw < 1)
    prev, nxt = phi[..., :-1], phi[..., 1:]
    safe = np.where(prev > 0, prev, 1.0)
    g = np.where(live, g_alpha, 0.0)
    # raw = 1 - nxt / prev
    g_prev = g * nxt / safe ** 2
    g_next = -g / safe
    dphi = phi * (1.0 - phi)  # derivative of the CDF w.r.t. its scaled argument
    g_phi = np.zeros_like(phi)
    g_phi[..., :-1] += g_prev
    g_phi[..., 1:] += g_next
    g_sdf = g_phi * dphi * inv_s
    g_inv_s = float(np.sum(g_phi * dphi * sdf))
    return g_sdf, g_inv_s


@dataclass
class RenderOutput:
    color: np.ndarray    # (R, 3)
    depth: np.ndarray    # (R,)
    opacity: np.ndarray  # (R,)
    weights: np.ndarray  # (R, n)


def weights_from_alphas(alphas) -> np.ndarray:
    a = np.asarray(alphas)
    trans = np.cumprod(np.concatenate([np.ones_like(a[..., :1]), 1.0 - a[..., :-1]], axis=-1), axis=-1)
    return a * trans


def composite(alphas, colors, t_mid) -> RenderOutput:
    """Expected color, depth and opacity of each ray."""
    alphas = np.asarray(alphas)
    colors = np.asarray(colors)
    t_mid = np.asarray(t_mid)
    if colors.shape[:-1] != alphas.shape or t_mid.shape != alphas.shape:
        raise ValueError(f"shape mismatch: alphas {alphas.shape}, colors {colors.shape}, t {t_mid.shape}")
    w = weights_from_alphas(alphas)
    return RenderOutput(np.einsum("...n,...nc->...c", w, colors), np.sum(w * t_mid, axis=-1), np.sum(w, axis=-1), w)


def composite_backward(alphas, colors, t_mid, g_color=None, g_depth=None, g_opacity=None):
    """Cotangents of :func:`composite` w.r.t. ``alphas`` and ``colors``.

    Uses the suffix recursion ``S_k = a_k q_k + (1 - a_k) S_{k+1}`` so that
    ``dOut/da_k = T_k (q_k - S_{k+1})`` stays exact when some ``a_k = 1``.
    """
    alphas = np.asarray(alphas)
    colors = np.asarray(colors)
    R = alphas.shape[:-1]
    n = alphas.shape[-1]
    g_color = np.zeros(R + (3,)) if g_color is None else np.asarray(g_color)
    g_depth = np.zeros(R) if g_depth is None else np.asarray(g_depth)
    g_opacity = np.zeros(R) if g_opacity is None else np.asarray(g_opacity)
    # collapse each per-section quantity into its scalar contribution to the loss
    q = np.einsum("...nc,...c->...n", colors, g_color) + np.asarray(t_mid) * g_depth[..., None] + g_opacity[..., None]
    trans = np.cumprod(np.concatenate([np.ones_like(alphas[..., :1]), 1.0 - alphas[..., :-1]], axis=-1), axis=-1)
    g_alpha = np.empty_like(alphas)
    suffix = np.zeros(R, dtype=alphas.dtype)
    for k in range(n - 1, -1, -1):
        g_alpha[..., k] = trans[..., k] * (q[..., k] - suffix)
        suffix = alphas[..., k] * q[..., k] + (1.0 - alphas[..., k]) * suffix
    g_colors = (alphas * trans)[..., None] * g_color[..., None, :]
    return g_alpha, g_colors


def dump_weight_profile(path, t, sdf, alphas, weights) -> None:
    """CSV with one row per section: ray, t, sdf, alpha, weight (section start readings)."""
    t, sdf = np.atleast_2d(t), np.atleast_2d(sdf)
    alphas, weights = np.atleast_2d(alphas), np.atleast_2d(weights)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ray", "t", "sdf", "alpha", "weight"])
        for r in range(len(t)):
            for k in range(alphas.shape[1]):
                wr.writerow([r, repr(float(t[r, k])), repr(float(sdf[r, k])),
                             repr(float(alphas[r, k])), repr(float(weights[r, k]))])


@dataclass
class RayRenderCache:
    field_cache: tuple
    sdf: np.ndarray
    alphas: np.ndarray
    colors: np.ndarray
    t_mid: np.ndarray
    inv_s: float
    n_points: int


def render_rays(field, inv_s, origins, dirs, t, image_idx):
    """Render rays sampled at depths ``t`` ``(R, m)``.

    The SDF is read at the ``m`` samples (giving ``m - 1`` section opacities);
    color is read at the section midpoints. Returns ``(RenderOutput, gradients,
    cache)`` where ``gradients`` are the SDF gradients at all evaluated points
    (samples first, then midpoints), the quantity the eikonal term needs.
    """
    origins, dirs = np.asarray(origins), np.asarray(dirs)
    t = np.asarray(t)
    R, m = t.shape
    n = m - 1
    t_mid = 0.5 * (t[:, 1:] + t[:, :-1])
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    mids = origins[:, None, :] + t_mid[..., None] * dirs[:, None, :]
    x = np.concatenate([pts.reshape(-1, 3), mids.reshape(-1, 3)])
    rows = np.arange(R * m, R * m + R * n)
    v = np.repeat(dirs, n, axis=0)
    idx = np.repeat(np.asarray(image_idx, dtype=np.int64).reshape(-1), n)
    out, fcache = field.forward(x, v, idx, color_rows=rows)
    sdf = out.sdf[:R * m].reshape(R, m)
    colors = out.color.reshape(R, n, 3)
    alphas = alphas_from_sdf(sdf, inv_s)
    ro = composite(alphas, colors, t_mid)
    return ro, out.grad, RayRenderCache(fcache, sdf, alphas, colors, t_mid, float(inv_s), len(x))


def render_backward(field, cache: RayRenderCache, g_color=None, g_opacity=None, g_depth=None, g_grad=None):
    """Returns ``(field parameter gradients, d loss / d inv_s)``."""
    g_alpha, g_colors = composite_backward(cache.alphas, cache.colors, cache.t_mid, g_color, g_depth, g_opacity)
    g_sdf_rays, g_inv_s = alphas_backward(cache.sdf, cache.inv_s, g_alpha)
    g_sdf = np.zeros(cache.n_points, dtype=field.dtype)
    g_sdf[:g_sdf_rays.size] = g_sdf_rays.reshape(-1)
    grads = field.backward(cache.field_cache, g_sdf, g_grad, g_colors.reshape(-1, 3))
    return grads, g_inv_s
