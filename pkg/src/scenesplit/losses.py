"""Loss terms for scene and object training, each with an exact backward pass.

All reductions are written as pure functions of rendered quantities and
masks. The mask losses share one binary-cross-entropy core; the compactness
variant exempts the present-but-occluded pixels derived from amodal boxes,
the occlusion-aware variant exempts every pixel claimed by another object.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import render as rnd
from .geometry import project_points

log = logging.getLogger(__name__)

BCE_EPS = 1e-6
PAD_PX = 2

LOSS_MODES = ("naive", "occlusion-aware", "compactness")


@dataclass
class TrainConfig:
    """Hyper-parameters of the optimization stages.

    The loss weights follow the published recipe (lambda=0.1, beta=0.9,
    gamma=0.001) as do the batch sizes (512 scene rays, 64 object rays).
    Iteration counts default to desk scale; paper-scale counts are accepted.
    """

    lambda_eik: float = 0.1
    beta_mask: float = 0.9
    gamma_overlap: float = 0.001
    batch_scene: int = 512
    batch_objects: int = 64
    iters_scene: int = 5000
    iters_objects: int = 3000
    loss_mode: str = "compactness"
    n_samples: int = 64
    lr: float = 1e-3
    lr_sharpness: float = 1e-4
    sharpness_init: float = 30.0
    grad_tmin: float = 1e-4
    n_overlap_points: int = 10000
    scene_resolution: int = 128
    object_resolution: int = 96
    erosion_base_px: int = 2
    amodal_pad_px: int = PAD_PX
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_eik, self.beta_mask, self.gamma_overlap) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class MaskSet:
    """Per-view binary object masks, pairwise disjoint after depth ordering."""

    view_id: str
    masks: np.ndarray  # (K, H, W) bool

    def __post_init__(self):
        self.masks = np.asarray(self.masks).astype(bool)
        if self.masks.ndim != 3:
            raise ValueError("masks must be (K, H, W)")

    @property
    def k(self):
        return self.masks.shape[0]

    def is_disjoint(self):
        return bool(np.all(self.masks.sum(axis=0) <= 1))


@dataclass
class AmodalBox:
    """Pixel-space bounding box of an object's projected 3D points."""

    row0: int
    row1: int
    col0: int
    col1: int

    def to_mask(self, height, width):
        m = np.zeros((height, width), dtype=bool)
        m[self.row0 : self.row1, self.col0 : self.col1] = True
        return m


# -- color ---------------------------------------------------------------------


def color_loss(rendered, observed, weights=None):
    """Mean L1 color error over the selected pixels.

    The normalizer is the number of selected pixels; with nothing selected
    the loss is defined as zero (and logged), so sparse masks stay safe.
    """
    loss, _ = color_loss_grad(rendered, observed, weights)
    return loss


def color_loss_grad(rendered, observed, weights=None):
    rendered = np.atleast_2d(np.asarray(rendered, dtype=np.float64))
    observed = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    if rendered.shape != observed.shape:
        raise ValueError("rendered/observed shapes differ")
    if weights is None:
        weights = np.ones(rendered.shape[0])
    weights = np.asarray(weights, dtype=np.float64)
    m = int(np.count_nonzero(weights))
    if m == 0:
        log.warning("color loss over zero selected pixels; returning 0")
        return 0.0, np.zeros_like(rendered)
    diff = rendered - observed
    loss = float(np.sum(weights[:, None] * np.abs(diff)) / m)
    grad = weights[:, None] * np.sign(diff) / m
    return loss, grad


# -- eikonal ---------------------------------------------------------------------


def eikonal_loss(fld, points):
    """Mean squared deviation of the gradient norm from one."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0:
        raise ValueError("eikonal loss needs a nonempty point set")
    g = fld.spatial_gradient(points)
    norms = np.linalg.norm(g, axis=-1)
    return float(np.mean((norms - 1.0) ** 2))


def eikonal_loss_backward(fld, points, upstream=1.0):
    """Accumulate d(eikonal)/d(values) * upstream into the field's pass."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g, cache = fld.gradient_cached(points)
    norms = np.linalg.norm(g, axis=-1)
    safe = np.maximum(norms, 1e-12)
    dL_dg = (2.0 * (norms - 1.0) / safe / points.shape[0] * upstream)[:, None] * g
    fld.backprop_gradient_cached(cache, dL_dg)
    return float(np.mean((norms - 1.0) ** 2))


# -- mask losses ------------------------------------------------------------------


def _bce(pred, target):
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return -(target * np.log(p) + (1.0 - target) * np.log1p(-p))


def _bce_grad(pred, target):
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    g = (p - target) / (p * (1.0 - p))
    # the clamp is part of the function; outside it the derivative vanishes
    g[(pred < BCE_EPS) | (pred > 1.0 - BCE_EPS)] = 0.0
    return g


def mask_loss_naive(opacities, masks):
    """Binary cross-entropy, summed over objects and averaged over pixels."""
    loss, _ = masked_bce_grad(opacities, masks, exempt=None)
    return loss


def compactness_loss(opacities, masks, occluded):
    """Mask BCE restricted to pixels outside the present-but-occluded set."""
    loss, _ = masked_bce_grad(opacities, masks, exempt=occluded)
    return loss


def occlusion_aware_loss(opacities, masks, other_union):
    """Mask BCE that skips every pixel claimed by any other object."""
    loss, _ = masked_bce_grad(opacities, masks, exempt=other_union)
    return loss


def masked_bce_grad(opacities, masks, exempt=None):
    """Shared core: (loss, d loss / d opacities) with optional exemptions.

    opacities and masks are (K, m); exempt is a (K, m) bool array of pixels
    excluded from the sum. The normalizer is the pixel count m, so with no
    exemptions the result reduces exactly to the naive mask loss.
    """
    o = np.atleast_2d(np.asarray(opacities, dtype=np.float64))
    t = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    if o.shape != t.shape:
        raise ValueError("opacity/mask shapes differ")
    m = o.shape[1]
    keep = np.ones_like(o, dtype=bool) if exempt is None else ~np.asarray(exempt, dtype=bool)
    loss = float(np.sum(_bce(o, t) * keep) / m)
    grad = _bce_grad(o, t) * keep / m
    return loss, grad


def occluded_mask(view, object_points, other_masks, pad_px=PAD_PX):
    """Present-but-occluded pixels: amodal box of the object's known 3D
    points intersected with the union of the other objects' masks.

    Projection deliberately ignores occlusion. Returns (mask, box); an empty
    point cloud yields an empty mask with a warning (object never observed).
    """
    height, width = other_masks[0].shape if len(other_masks) else (view.height, view.width)
    object_points = np.asarray(object_points, dtype=np.float64).reshape(-1, 3)
    empty = np.zeros((height, width), dtype=bool)
    if object_points.shape[0] == 0:
        log.warning("occluded_mask: object has no labeled 3D points; empty mask")
        return empty, None
    rows, cols, depths = project_points(view, object_points)
    ok = (depths > 0) & (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    if not ok.any():
        return empty, None
    r, c = rows[ok], cols[ok]
    box = AmodalBox(
        row0=max(int(np.floor(r.min())) - pad_px, 0),
        row1=min(int(np.floor(r.max())) + 1 + pad_px, height),
        col0=max(int(np.floor(c.min())) - pad_px, 0),
        col1=min(int(np.floor(c.max())) + 1 + pad_px, width),
    )
    union = np.zeros((height, width), dtype=bool)
    for m in other_masks:
        union |= np.asarray(m, dtype=bool)
    return box.to_mask(height, width) & union, box


def other_masks_union(masks, k):
    """Union of every mask except index k."""
    others = [m for i, m in enumerate(masks) if i != k]
    if not others:
        return np.zeros_like(np.asarray(masks[0], dtype=bool))
    return np.any(np.asarray(others, dtype=bool), axis=0)


# -- overlap ---------------------------------------------------------------------


def overlap_loss(sdfs, points):
    """Hinge penalty on points interior to more than one object.

    For each probe point the SDF with the most negative value wins (ties go
    to the lowest object index); every other field is penalized for being
    negative there. The printed formula in the source differs in sign from
    its stated intent; the interior-penalizing form implemented here matches
    the intent.
    """
    loss, _ = _overlap_eval(sdfs, points)
    return loss


def _overlap_eval(sdfs, points):
    if len(sdfs) < 2:
        return 0.0, None
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    f = np.stack([s.query(points) for s in sdfs], axis=0)  # (K, N)
    winner = np.argmin(f, axis=0)
    contrib = np.maximum(-f, 0.0)
    contrib[winner, np.arange(points.shape[0])] = 0.0
    loss = float(contrib.sum(axis=0).mean())
    active = (f < 0.0) & (np.arange(len(sdfs))[:, None] != winner[None, :])
    return loss, active


def overlap_loss_backward(sdfs, points, upstream=1.0):
    """Accumulate overlap gradients into each field's open pass."""
    loss, active = _overlap_eval(sdfs, points)
    if active is None:
        return loss
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    for k, sdf in enumerate(sdfs):
        sel = active[k]
        if sel.any():
            sdf.backprop_query(points[sel], -upstream / n)
    return loss


# -- totals -----------------------------------------------------------------------


@dataclass
class LossBreakdown:
    color: float = 0.0
    eikonal: float = 0.0
    mask: float = 0.0
    overlap: float = 0.0
    total: float = 0.0
    d_sharpness: float = 0.0
    mask_term: str = ""


def total_loss(
    ctxs,
    observed,
    config,
    *,
    pixel_masks=None,
    exempt=None,
    uniform_points=None,
    overlap_points=None,
    grad_tmin=None,
):
    """Full training objective with gradient accumulation.

    Stage selection follows the inputs: without ``pixel_masks`` this is the
    scene objective (color + eikonal); with them it is the K-object
    objective (masked color + mask mode + eikonal + overlap). ``ctxs`` holds
    one render context per field, each rendering the identical pixel batch.
    ``exempt`` is the (K, m) exemption set of the active loss mode (None for
    the naive mode). Gradients accumulate into the fields' open passes and
    the sharpness gradient is returned in the breakdown.
    """
    observed = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    gt = config.grad_tmin if grad_tmin is None else grad_tmin
    out = LossBreakdown()
    scene_stage = pixel_masks is None
    kf = len(ctxs)

    d_colors = [np.zeros((observed.shape[0], 3)) for _ in range(kf)]
    d_opac = [np.zeros(observed.shape[0]) for _ in range(kf)]

    if scene_stage:
        rendered = np.einsum("ns,nsc->nc", ctxs[0].weights, ctxs[0].colors)
        closs, cgrad = color_loss_grad(rendered, observed)
        out.color = closs
        d_colors[0] += cgrad
    else:
        pixel_masks = np.atleast_2d(np.asarray(pixel_masks, dtype=np.float64))
        # masked color: pixels of object k are rendered (and penalized) by field k only
        for k in range(kf):
            rendered = np.einsum("ns,nsc->nc", ctxs[k].weights, ctxs[k].colors)
            closs, cgrad = color_loss_grad(rendered, observed, weights=pixel_masks[k])
            out.color += closs
            d_colors[k] += cgrad
        opac = np.stack([c.weights.sum(axis=1) for c in ctxs], axis=0)
        mloss, mgrad = masked_bce_grad(opac, pixel_masks, exempt=exempt)
        out.mask = mloss
        out.mask_term = {
            "naive": "mask_naive",
            "occlusion-aware": "mask_occlusion_aware",
            "compactness": "mask_compactness",
        }[config.loss_mode]
        for k in range(kf):
            d_opac[k] += config.beta_mask * mgrad[k]
        if overlap_points is not None and kf >= 2:
            out.overlap = overlap_loss_backward(
                [c.sdf_field for c in ctxs], overlap_points, upstream=config.gamma_overlap
            )

    # eikonal over ray samples plus uniform points, averaged across fields
    for k, ctx in enumerate(ctxs):
        pts = ctx.points.reshape(-1, 3)
        if uniform_points is not None:
            pts = np.concatenate([pts, np.atleast_2d(uniform_points)], axis=0)
        out.eikonal += eikonal_loss_backward(
            ctx.sdf_field, pts, upstream=config.lambda_eik / kf
        )
    out.eikonal /= kf

    for k, ctx in enumerate(ctxs):
        out.d_sharpness += rnd.render_backward(
            ctx, d_colors[k], d_opac[k], grad_tmin=gt
        )

    out.total = (
        out.color
        + config.lambda_eik * out.eikonal
        + (0.0 if scene_stage else config.beta_mask * out.mask)
        + (0.0 if scene_stage else config.gamma_overlap * out.overlap)
    )
    return out
