"""Training orchestration: full-scene optimization and joint K-object carving.

Stage 1 fits one SDF + color grid to the posed images with the rendering and
eikonal objective. Stage 3 clones that scene field into K per-object fields
and trains them jointly under masked color, a mask-consistency mode, the
eikonal term, and the interior-overlap penalty on a fixed probe set.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import losses as L
from .field import ColorField, ObjectFieldSet, SdfField, save_field
from .geometry import pixel_rays
from .render import render_rays

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training hit a non-finite loss; a diagnostic checkpoint was written."""


SCENE_INIT_RADIUS = 0.6  # stage-1 init: f0 = |p| - R, a shell enclosing the scene
SCENE_COLOR_INIT = (0.9, 0.9, 0.9)
SPHERE_INIT_RADIUS = 0.5  # stage-3 from-scratch baseline
BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


class GridAdam:
    """Adaptive-moment optimizer over a voxel grid, updating touched voxels.

    Moments are kept dense but only indices touched in the current pass are
    stepped (a full-grid update per iteration would dominate the runtime).
    Bias correction uses the global step count.
    """

    def __init__(self, grid, lr, betas=(0.9, 0.999), eps=1e-8, clamp=None):
        self.grid = grid
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clamp = clamp  # (lo, hi) applied to touched entries after the step
        self.m = np.zeros_like(grid.values)
        self.v = np.zeros_like(grid.values)
        self.t = 0

    def step(self, lr_scale=1.0):
        self.t += 1
        idx = self.grid.touched_indices()
        if idx.size == 0:
            return
        c = self.grid.channels
        vals = self.grid.values.reshape(-1, c) if c > 1 else self.grid.values.reshape(-1)
        grad = self.grid.grad.reshape(-1, c) if c > 1 else self.grid.grad.reshape(-1)
        m = self.m.reshape(-1, c) if c > 1 else self.m.reshape(-1)
        v = self.v.reshape(-1, c) if c > 1 else self.v.reshape(-1)
        g = grad[idx]
        mm = self.b1 * m[idx] + (1 - self.b1) * g
        vv = self.b2 * v[idx] + (1 - self.b2) * g * g
        m[idx] = mm
        v[idx] = vv
        denom = np.sqrt(vv / (1 - self.b2**self.t))
        denom += self.eps
        step = (self.lr * lr_scale / (1 - self.b1**self.t)) * mm
        step /= denom
        new = vals[idx] - step
        if self.clamp is not None:
            np.clip(new, self.clamp[0], self.clamp[1], out=new)
        vals[idx] = new


class ScalarAdam:
    def __init__(self, value, lr, betas=(0.9, 0.999), eps=1e-8):
        self.value = float(value)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = 0.0
        self.v = 0.0
        self.t = 0

    def step(self, grad, lr_scale=1.0):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        self.value -= self.lr * lr_scale * mhat / (math.sqrt(vhat) + self.eps)
        return self.value


def cosine_lr(step, total):
    return 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


@dataclass
class TrainRun:
    """Record of one optimization stage; reproducible per seed."""

    stage: str
    config: L.TrainConfig
    seed: int
    history: list = dc_field(default_factory=list)
    sharpness: float = 0.0


class RayBank:
    """Precomputed pixel rays for a set of views (origins, dirs, t ranges)."""

    def __init__(self, views):
        self.views = views
        h, w = views[0].height, views[0].width
        rr, cc = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        self.origins = np.empty((len(views), 3))
        self.dirs = np.empty((len(views), h, w, 3))
        self.t_far = np.empty((len(views), h, w))
        self.images = np.stack([v.image for v in views])
        for i, view in enumerate(views):
            o, d, tn, tf = pixel_rays(view, rr.ravel(), cc.ravel())
            self.origins[i] = view.camera_center
            self.dirs[i] = d.reshape(h, w, 3)
            self.t_far[i] = tf.reshape(h, w)
        self.h, self.w = h, w

    def batch(self, rng, size):
        vi = rng.integers(0, len(self.views), size)
        r = rng.integers(0, self.h, size)
        c = rng.integers(0, self.w, size)
        o = self.origins[vi]
        d = self.dirs[vi, r, c]
        tf = self.t_far[vi, r, c]
        tn = np.full(size, 1e-4)
        obs = self.images[vi, r, c]
        return (vi, r, c), (o, d, tn, tf), obs


def _finite(*xs):
    return all(np.all(np.isfinite(x)) for x in xs)


def _write_losses_header(path, columns):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(columns)


def _append_losses(path, row):
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(row)


def train_scene(views, config, run_dir=None, rng=None, log_every=500):
    """Stage 1: fit the full-scene SDF and color grids by rendering losses.

    The SDF starts as a sphere shell enclosing the scene; background rays
    carve it inward toward the visual hull and photo-consistency then
    localizes the surfaces. The color grid starts near-white so that rays
    over the (black) background favor carving over painting the shell dark,
    which would otherwise be an equally consistent degenerate solution.
    """
    if len(views) < 2:
        raise ValueError("scene training needs at least two views")
    rng = rng or np.random.default_rng(config.seed)
    res = (config.scene_resolution,) * 3
    sdf = SdfField.from_function(
        lambda p: np.linalg.norm(p, axis=-1) - SCENE_INIT_RADIUS, res, BOUNDS
    )
    color = ColorField.constant(res, BOUNDS, SCENE_COLOR_INIT)
    sharp = ScalarAdam(config.sharpness_init, config.lr_sharpness)
    opt_sdf = GridAdam(sdf, config.lr, clamp=(-sdf.diameter, sdf.diameter))
    opt_col = GridAdam(color, config.lr, clamp=(0.0, 1.0))
    bank = RayBank(views)
    run = TrainRun(stage="scene", config=config, seed=config.seed)
    losses_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        losses_path = run_dir / "losses.csv"
        _write_losses_header(losses_path, ["iteration", "color", "eikonal", "total"])

    for it in range(config.iters_scene):
        _, rays, observed = bank.batch(rng, config.batch_scene)
        sdf.zero_grad()
        color.zero_grad()
        _, _, _, ctx = render_rays(
            sdf, color, *rays, config.n_samples, sharp.value, stratified=True, rng=rng,
            want_ctx=True,
        )
        n_uniform = rays[0].shape[0] * config.n_samples
        upts = rng.uniform(-1.0, 1.0, (n_uniform, 3))
        out = L.total_loss([ctx], observed, config, uniform_points=upts)
        if not math.isfinite(out.total):
            _diagnostic_dump(run_dir, sdf, color, it)
            raise NumericalError(f"non-finite loss at iteration {it}")
        scale = cosine_lr(it, config.iters_scene)
        opt_sdf.step(scale)
        opt_col.step(scale)
        sharp.step(out.d_sharpness, scale)
        sharp.value = max(sharp.value, ObjectFieldSet.S_MIN)
        run.history.append(
            {"iteration": it, "color": out.color, "eikonal": out.eikonal, "total": out.total}
        )
        if losses_path is not None:
            _append_losses(losses_path, [it, out.color, out.eikonal, out.total])
        if run_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            _save_scene(run_dir, sdf, color, sharp.value, it + 1, config)
        if log_every and it % log_every == 0:
            log.info("scene it %d: color %.4f eik %.4f s %.1f", it, out.color, out.eikonal, sharp.value)

    run.sharpness = sharp.value
    if run_dir is not None:
        _save_scene(run_dir, sdf, color, sharp.value, config.iters_scene, config)
    return sdf, color, run


def _save_scene(run_dir, sdf, color, sharpness, iteration, config):
    run_dir = Path(run_dir)
    save_field(run_dir / "scene.field", sdf)
    save_field(run_dir / "scene_color.field", color)
    state = {"sharpness": sharpness, "iteration": iteration, "stage": "scene"}
    (run_dir / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True))


def _diagnostic_dump(run_dir, sdf, color, iteration):
    if run_dir is None:
        return
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_field(run_dir / f"diagnostic_{iteration:06d}.field", sdf)
    save_field(run_dir / f"diagnostic_{iteration:06d}_color.field", color)


def init_objects(scene_sdf, scene_color, k, config=None, mode="scene-copy", sharpness=None):
    """K per-object field pairs, each a resampled copy of the scene fields.

    ``mode="sphere"`` instead gives the from-scratch baseline (f = |p| - 0.5,
    gray color) used by the initialization ablation.
    """
    config = config or L.TrainConfig()
    res = (config.object_resolution,) * 3
    sdfs, colors = [], []
    for _ in range(k):
        if mode == "scene-copy":
            f = SdfField(res, BOUNDS)
            centers = f.voxel_centers().reshape(-1, 3)
            f.values = scene_sdf.query(centers).reshape(res)
            c = ColorField(res, BOUNDS)
            c.values = scene_color.query(centers).reshape(*res, 3)
        elif mode == "sphere":
            f = SdfField.from_function(
                lambda p: np.linalg.norm(p, axis=-1) - SPHERE_INIT_RADIUS, res, BOUNDS
            )
            c = ColorField.constant(res, BOUNDS)
        else:
            raise ValueError(f"unknown init mode {mode!r}")
        sdfs.append(f)
        colors.append(c)
    s0 = config.sharpness_init if sharpness is None else sharpness
    return ObjectFieldSet(sdfs, colors, sharpness=s0)


def precompute_exemptions(views, masksets, cloud, config):
    """Per-view (K, H, W) exemption masks for the active loss mode.

    Computed once from the stage-2 clouds; compactness uses amodal boxes
    intersected with the other objects' masks, the occlusion-aware mode
    exempts everything any other object claims, the naive mode nothing.
    """
    exempt = {}
    for view in views:
        masks = masksets[view.view_id]
        kk = masks.shape[0]
        if config.loss_mode == "naive":
            exempt[view.view_id] = np.zeros_like(masks, dtype=bool)
            continue
        per_obj = []
        for k in range(kk):
            others = [masks[i] for i in range(kk) if i != k]
            if config.loss_mode == "occlusion-aware":
                per_obj.append(L.other_masks_union(masks, k))
            else:
                occ, _ = L.occluded_mask(
                    view, cloud.of_label(k), others, pad_px=config.amodal_pad_px
                )
                per_obj.append(occ)
        exempt[view.view_id] = np.stack(per_obj)
    return exempt


def train_objects(views, masksets, cloud, scene_sdf, scene_color, config,
                  run_dir=None, rng=None, init_mode="scene-copy", field_set=None,
                  log_every=500):
    """Stage 3: jointly optimize K object fields against masks and images.

    ``masksets`` maps view ids to disjoint (K, H, W) masks; ``cloud`` is the
    stage-2 labeled point cloud (fixed; used once for the amodal boxes).
    ``field_set`` overrides initialization (the floater-seeding ablation).
    """
    rng = rng or np.random.default_rng(config.seed)
    views = [v for v in views if v.view_id in masksets]
    if not views:
        raise ValueError("no views carry masks")
    kk = next(iter(masksets.values())).shape[0]
    for vid, m in masksets.items():
        if np.asarray(m).astype(bool).sum(axis=0).max() > 1:
            raise ValueError(f"masks of view {vid} are not disjoint")
    fs = field_set or init_objects(scene_sdf, scene_color, kk, config, mode=init_mode)
    exempt = precompute_exemptions(views, masksets, cloud, config)
    overlap_points = rng.uniform(-1.0, 1.0, (config.n_overlap_points, 3))
    bank = RayBank(views)
    mask_stack = np.stack([np.asarray(masksets[v.view_id], dtype=np.float64) for v in views])
    exempt_stack = np.stack([exempt[v.view_id] for v in views])
    opts = [GridAdam(f, config.lr, clamp=(-f.diameter, f.diameter)) for f in fs.sdfs]
    copts = [GridAdam(c, config.lr, clamp=(0.0, 1.0)) for c in fs.colors]
    sharp = ScalarAdam(fs.sharpness, config.lr_sharpness)
    run = TrainRun(stage="objects", config=config, seed=config.seed)
    mask_col = {
        "naive": "mask_naive",
        "occlusion-aware": "mask_occlusion_aware",
        "compactness": "mask_compactness",
    }[config.loss_mode]
    losses_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        losses_path = run_dir / "losses_objects.csv"
        _write_losses_header(
            losses_path, ["iteration", "color", "eikonal", mask_col, "overlap", "total"]
        )

    for it in range(config.iters_objects):
        (vi, r, c), rays, observed = bank.batch(rng, config.batch_objects)
        pixel_masks = mask_stack[vi, :, r, c].T  # (K, B)
        pixel_exempt = exempt_stack[vi, :, r, c].T
        ctxs = []
        for k in range(kk):
            fs.sdfs[k].zero_grad()
            fs.colors[k].zero_grad()
            _, _, _, ctx = render_rays(
                fs.sdfs[k], fs.colors[k], *rays, config.n_samples, sharp.value,
                stratified=True, rng=rng, want_ctx=True,
            )
            ctxs.append(ctx)
        n_uniform = rays[0].shape[0] * config.n_samples
        upts = rng.uniform(-1.0, 1.0, (n_uniform, 3))
        out = L.total_loss(
            ctxs, observed, config,
            pixel_masks=pixel_masks, exempt=pixel_exempt,
            uniform_points=upts, overlap_points=overlap_points,
        )
        if not math.isfinite(out.total):
            _diagnostic_dump(run_dir, fs.sdfs[0], fs.colors[0], it)
            raise NumericalError(f"non-finite loss at iteration {it}")
        scale = cosine_lr(it, config.iters_objects)
        for k in range(kk):
            opts[k].step(scale)
            copts[k].step(scale)
        fs.sharpness = sharp.step(out.d_sharpness, scale)
        fs.clamp_sharpness()
        sharp.value = fs.sharpness
        row = {
            "iteration": it, "color": out.color, "eikonal": out.eikonal,
            mask_col: out.mask, "overlap": out.overlap, "total": out.total,
        }
        run.history.append(row)
        if losses_path is not None:
            _append_losses(
                losses_path, [it, out.color, out.eikonal, out.mask, out.overlap, out.total]
            )
        if run_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            _save_objects(run_dir, fs, it + 1)
        if log_every and it % log_every == 0:
            log.info(
                "objects it %d: color %.4f mask %.4f overlap %.5f", it, out.color, out.mask, out.overlap
            )

    run.sharpness = fs.sharpness
    if run_dir is not None:
        _save_objects(run_dir, fs, config.iters_objects)
    return fs, run, overlap_points


def _save_objects(run_dir, fs, iteration):
    run_dir = Path(run_dir)
    for k in range(fs.k):
        save_field(run_dir / f"object_{k}.field", fs.sdfs[k])
        save_field(run_dir / f"object_{k}_color.field", fs.colors[k])
    state = {"sharpness": fs.sharpness, "iteration": iteration, "stage": "objects"}
    (run_dir / "state_objects.json").write_text(json.dumps(state, indent=2, sort_keys=True))
