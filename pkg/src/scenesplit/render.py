"""Volume rendering of SDF + color grids along rays.

Per-sample opacity comes from the sigmoid-of-SDF transform

    alpha_i = max((sig(s*f_i) - sig(s*f_{i+1})) / sig(s*f_i), 0)

composited front to back with transmittance T_i = prod_{j<i}(1 - alpha_j).
``render_backward`` provides exact gradients of the rendered color and
opacity with respect to the voxel grids and the sharpness scalar, derived by
hand so they can be validated against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

DEPTH_EPS = 1e-6
_PHI_FLOOR = 1e-300


class MissingForwardData(RuntimeError):
    """Raised when a backward pass is requested without retained forward data."""


@dataclass
class RaySamples:
    """Per-ray sample bookkeeping retained by the forward pass."""

    positions: np.ndarray  # (n, 3)
    distances: np.ndarray  # (n,), strictly increasing
    sdf_values: np.ndarray  # (n,)
    alphas: np.ndarray  # (n-1,), in [0, 1]
    transmittance: np.ndarray  # (n-1,), T_1 = 1, non-increasing


@dataclass
class RenderResult:
    color: np.ndarray
    opacity: float
    depth: float
    samples: RaySamples


def sample_ray(ray, n, stratified=False, rng=None):
    """Sample n distances in [t_near, t_far], strictly increasing.

    Deterministic mode returns the midpoints of n equal-width bins;
    stratified mode draws one uniform sample per bin.
    """
    ts = sample_distances(
        np.array([ray.t_near]), np.array([ray.t_far]), n, stratified=stratified, rng=rng
    )
    return ts[0]

def sample_distances(t_near, t_far, n, stratified=False, rng=None):
    if n < 2:
        raise ValueError("need at least two samples per ray")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    width = (t_far - t_near)[:, None] / n
    edges = t_near[:, None] + width * np.arange(n)[None, :]
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((t_near.shape[0], n))
    else:
        u = 0.5
    return edges + width * u


def alpha_from_sdf(f_i, f_next, s):
    """Opacity of one segment from its endpoint SDF values (vectorized)."""
    if s <= 0:
        raise ValueError("sharpness must be positive")
    phi_i = np.maximum(expit(s * np.asarray(f_i, dtype=np.float64)), _PHI_FLOOR)
    phi_n = expit(s * np.asarray(f_next, dtype=np.float64))
    return np.maximum((phi_i - phi_n) / phi_i, 0.0)


@dataclass
class RenderContext:
    """Forward-pass data needed for the exact backward pass."""

    sdf_field: object
    color_field: object
    points: np.ndarray  # (N, n, 3)
    ts: np.ndarray  # (N, n)
    f: np.ndarray  # (N, n)
    phi: np.ndarray  # (N, n)
    alphas: np.ndarray  # (N, n-1)
    trans: np.ndarray  # (N, n-1)
    weights: np.ndarray  # (N, n-1)
    colors: np.ndarray  # (N, n-1, 3)
    sharpness: float
    sdf_cache: tuple = None  # corner (indices, weights) of the sdf queries
    color_cache: tuple = None


def render_rays(
    sdf_field,
    color_field,
    origins,
    dirs,
    t_near,
    t_far,
    n,
    sharpness,
    stratified=False,
    rng=None,
    want_ctx=False,
):
    """Render a batch of rays; returns (colors, opacities, depths, ctx).

    ``ctx`` is None unless want_ctx is set. Opacity is the accumulated weight
    sum; expected depth is weight-averaged distance with an epsilon guard, so
    every output is finite for finite fields.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    ts = sample_distances(
        np.atleast_1d(t_near), np.atleast_1d(t_far), n, stratified=stratified, rng=rng
    )
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    nrays = pts.shape[0]
    f, sdf_cache = sdf_field.query_cached(pts.reshape(-1, 3))
    f = f.reshape(nrays, n)
    phi = np.maximum(expit(sharpness * f), _PHI_FLOOR)
    alphas = np.maximum((phi[:, :-1] - phi[:, 1:]) / phi[:, :-1], 0.0)
    trans = np.cumprod(1.0 - alphas, axis=1)
    trans = np.concatenate([np.ones((nrays, 1)), trans[:, :-1]], axis=1)
    weights = trans * alphas
    cols, color_cache = color_field.query_cached(pts[:, :-1].reshape(-1, 3))
    cols = cols.reshape(nrays, n - 1, 3)
    color = np.einsum("ns,nsc->nc", weights, cols)
    opacity = weights.sum(axis=1)
    depth = np.einsum("ns,ns->n", weights, ts[:, :-1]) / np.maximum(opacity, DEPTH_EPS)
    ctx = None
    if want_ctx:
        ctx = RenderContext(
            sdf_field, color_field, pts, ts, f, phi, alphas, trans, weights, cols, sharpness,
            sdf_cache=sdf_cache, color_cache=color_cache,
        )
    return color, opacity, depth, ctx


def render_ray(sdf_field, color_field, ray, n, sharpness, stratified=False, rng=None):
    """Render one ray and return color, opacity, expected depth, and samples."""
    color, opacity, depth, ctx = render_rays(
        sdf_field,
        color_field,
        ray.origin[None],
        ray.direction[None],
        np.array([ray.t_near]),
        np.array([ray.t_far]),
        n,
        sharpness,
        stratified=stratified,
        rng=rng,
        want_ctx=True,
    )
    samples = RaySamples(
        positions=ctx.points[0],
        distances=ctx.ts[0],
        sdf_values=ctx.f[0],
        alphas=ctx.alphas[0],
        transmittance=ctx.trans[0],
    )
    return RenderResult(color[0], float(opacity[0]), float(depth[0]), samples)


def render_backward(ctx, d_colors=None, d_opacities=None, grad_tmin=0.0):
    """Accumulate gradients of (color, opacity) into the fields; returns ds.

    d_colors (N,3) and d_opacities (N,) are the upstream loss gradients.
    grad_tmin > 0 drops gradient contributions of samples whose transmittance
    has fallen below the threshold; those terms are bounded by grad_tmin and
    skipping them freezes regions the renderer can no longer see. The default
    0.0 keeps the backward pass exact.
    """
    if ctx is None:
        raise MissingForwardData("render_backward needs the context of a forward pass")
    nrays, n = ctx.f.shape
    gC = np.zeros((nrays, 3)) if d_colors is None else np.asarray(d_colors, dtype=np.float64)
    gO = np.zeros(nrays) if d_opacities is None else np.asarray(d_opacities, dtype=np.float64)

    gw = np.einsum("nc,nsc->ns", gC, ctx.colors) + gO[:, None]
    if grad_tmin > 0.0:
        gw = np.where(ctx.trans < grad_tmin, 0.0, gw)

    # d/d(alpha_k) = gw_k T_k - (sum_{i>k} gw_i w_i) / (1 - alpha_k)
    c = gw * ctx.weights
    suffix = np.flip(np.cumsum(np.flip(c, axis=1), axis=1), axis=1) - c
    one_minus = np.maximum(1.0 - ctx.alphas, 1e-12)
    dA = gw * ctx.trans - suffix / one_minus
    if grad_tmin > 0.0:
        dA = np.where(ctx.trans < grad_tmin, 0.0, dA)

    # alpha -> (phi_i, phi_{i+1}); clamped segments pass no gradient
    pos = (ctx.phi[:, :-1] - ctx.phi[:, 1:]) > 0.0
    dA = np.where(pos, dA, 0.0)
    dphi = np.zeros_like(ctx.phi)
    dphi[:, :-1] += dA * ctx.phi[:, 1:] / ctx.phi[:, :-1] ** 2
    dphi[:, 1:] += -dA / ctx.phi[:, :-1]

    sig_prime = ctx.phi * (1.0 - ctx.phi)
    df = dphi * ctx.sharpness * sig_prime
    ds = float(np.sum(dphi * ctx.f * sig_prime))

    flat_df = df.ravel()
    sidx, sw = ctx.sdf_cache
    if grad_tmin > 0.0:
        keep = flat_df != 0.0
        if keep.any():
            ctx.sdf_field.backprop_query_cached((sidx[keep], sw[keep]), flat_df[keep])
    else:
        ctx.sdf_field.backprop_query_cached((sidx, sw), flat_df)

    dc = (ctx.weights[..., None] * gC[:, None, :]).reshape(-1, 3)
    cidx, cw = ctx.color_cache
    if grad_tmin > 0.0:
        keep = np.any(dc != 0.0, axis=1)
        if keep.any():
            ctx.color_field.backprop_query_cached((cidx[keep], cw[keep]), dc[keep])
    else:
        ctx.color_field.backprop_query_cached((cidx, cw), dc)
    return ds
