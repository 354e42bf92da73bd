"""Segmentation propagation: one anchor view to every view.

The anchor masks are backprojected onto the reconstructed surface to get
labeled 3D points, which are reprojected (visibility-checked) into each
target view as prompt seeds for a promptable segmenter. Overlapping
per-object masks are reconciled by a seed-count depth ordering. The whole
procedure iterates, relabeling from all views after the first pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from . import scene_synth
from .geometry import pixel_rays, project_points, surface_depths, visible_mask

log = logging.getLogger(__name__)


class SegmenterError(RuntimeError):
    """A segmenter call failed; the view is skipped and recorded."""


@dataclass
class PropagationConfig:
    iterations: int = 2
    coreset_size: int = 15
    erosion_radius_px: int | None = None  # None: 2 px at 512 width, scaled
    outlier_sigma: float = 2.5
    merge_resolution: int = 256
    hit_tol: float = 1e-3
    delta_vis: float = 1e-2

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.coreset_size < 1:
            raise ValueError("coreset size must be at least 1")

    def erosion_radius(self, width):
        if self.erosion_radius_px is not None:
            return self.erosion_radius_px
        return max(1, round(2 * width / 512))


@dataclass
class LabeledPointCloud:
    points: np.ndarray  # (N, 3)
    labels: np.ndarray  # (N,) int
    source_views: np.ndarray  # (N,) str
    depths: np.ndarray  # (N,) distance along the source pixel ray

    @classmethod
    def empty(cls):
        return cls(
            np.empty((0, 3)),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=object),
            np.empty(0),
        )

    @property
    def size(self):
        return self.points.shape[0]

    def of_label(self, k):
        return self.points[self.labels == k]


@dataclass
class SegmenterPrompt:
    view_id: str
    seeds: list  # [(row, col, positive), ...]


@dataclass
class SegmenterResult:
    mask: np.ndarray  # (H, W) bool
    confidence: float


def label_points(fld, view, masks, config=None):
    """Backproject one view's masks into labeled surface points.

    Per object: erode the mask (square element), sphere-trace the surviving
    pixel rays, drop misses, drop depth outliers beyond
    ``outlier_sigma`` standard deviations, then discard multi-label merge
    cells. Erosion plus outlier removal is what keeps boundary leakage from
    contaminating the cloud.
    """
    config = config or PropagationConfig()
    masks = np.asarray(masks, dtype=bool)
    radius = config.erosion_radius(view.width)
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    pts, labels, views_, depths = [], [], [], []
    for k in range(masks.shape[0]):
        eroded = ndimage.binary_erosion(masks[k], structure=structure)
        rows, cols = np.nonzero(eroded)
        if rows.size == 0:
            if masks[k].any():
                log.warning(
                    "label_points: mask %d of view %s vanished under erosion", k, view.view_id
                )
            continue
        o, d, tn, tf = pixel_rays(view, rows + 0.5, cols + 0.5)
        t = surface_depths(fld, o, d, tn, tf, hit_tol=config.hit_tol)
        hit = ~np.isnan(t)
        if not hit.any():
            continue
        t = t[hit]
        p = o[hit] + t[:, None] * d[hit]
        mu, sigma = t.mean(), t.std()
        keep = np.abs(t - mu) <= config.outlier_sigma * sigma if sigma > 0 else np.ones_like(t, bool)
        pts.append(p[keep])
        labels.append(np.full(int(keep.sum()), k, dtype=np.int64))
        views_.append(np.full(int(keep.sum()), view.view_id, dtype=object))
        depths.append(t[keep])
    if not pts:
        return LabeledPointCloud.empty()
    cloud = LabeledPointCloud(
        np.concatenate(pts),
        np.concatenate(labels),
        np.concatenate(views_),
        np.concatenate(depths),
    )
    return discard_multilabel_cells(cloud, config.merge_resolution)


def discard_multilabel_cells(cloud, resolution):
    """Drop every point in a merge-grid cell claimed by two or more labels."""
    if cloud.size == 0:
        return cloud
    res = int(resolution)
    ijk = np.clip(((cloud.points + 1.0) / 2.0 * res).astype(np.int64), 0, res - 1)
    key = (ijk[:, 0] * res + ijk[:, 1]) * res + ijk[:, 2]
    order = np.argsort(key, kind="stable")
    k_sorted = key[order]
    l_sorted = cloud.labels[order]
    boundaries = np.concatenate(([True], k_sorted[1:] != k_sorted[:-1]))
    group_id = np.cumsum(boundaries) - 1
    n_groups = group_id[-1] + 1
    gmin = np.full(n_groups, np.iinfo(np.int64).max)
    gmax = np.full(n_groups, np.iinfo(np.int64).min)
    np.minimum.at(gmin, group_id, l_sorted)
    np.maximum.at(gmax, group_id, l_sorted)
    keep_sorted = gmin[group_id] == gmax[group_id]
    keep = np.empty_like(keep_sorted)
    keep[order] = keep_sorted
    return LabeledPointCloud(
        cloud.points[keep], cloud.labels[keep], cloud.source_views[keep], cloud.depths[keep]
    )


def merge_clouds(clouds, config=None):
    config = config or PropagationConfig()
    clouds = [c for c in clouds if c.size]
    if not clouds:
        return LabeledPointCloud.empty()
    merged = LabeledPointCloud(
        np.concatenate([c.points for c in clouds]),
        np.concatenate([c.labels for c in clouds]),
        np.concatenate([c.source_views for c in clouds]),
        np.concatenate([c.depths for c in clouds]),
    )
    return discard_multilabel_cells(merged, config.merge_resolution)


def coreset_select(points, n):
    """Greedy spread-out subset: centroid-nearest first, then farthest-point.

    Returns indices into ``points`` in selection order; ties break toward
    the lowest input index. Output is min(n, len(points)) distinct indices.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("coreset selection needs a nonempty 2D point set")
    first = int(np.argmin(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    chosen = [first]
    min_d = np.linalg.norm(points - points[first], axis=1)
    min_d[first] = -np.inf
    while len(chosen) < min(n, points.shape[0]):
        nxt = int(np.argmax(min_d))
        chosen.append(nxt)
        min_d = np.minimum(min_d, np.linalg.norm(points - points[nxt], axis=1))
        min_d[nxt] = -np.inf
    return np.asarray(chosen, dtype=np.int64)


@dataclass
class ObjectProposal:
    mask: np.ndarray  # (H, W) bool
    seeds: np.ndarray  # (S, 2) int pixel (row, col)
    confidence: float = 0.0
    n_visible: int = 0


def propagate_view(fld, cloud, view, segmenter, config=None, k_total=None):
    """Per-object masks for one target view from the labeled cloud.

    Visible labeled points project to candidate pixels; a coreset keeps the
    prompt small (large seed sets make promptable segmenters oversegment).
    Objects with no visible point (or no points at all) get an empty mask.
    """
    config = config or PropagationConfig()
    if k_total is None:
        k_total = int(cloud.labels.max()) + 1 if cloud.size else 0
    proposals = []
    for k in range(k_total):
        pts = cloud.of_label(k)
        if pts.shape[0] == 0:
            proposals.append(_empty_proposal(view))
            continue
        vis = visible_mask(fld, view, pts, hit_tol=config.hit_tol, delta_vis=config.delta_vis)
        if not vis.any():
            proposals.append(_empty_proposal(view))
            continue
        rows, cols, _ = project_points(view, pts[vis])
        pr = np.clip(np.floor(rows).astype(np.int64), 0, view.height - 1)
        pc = np.clip(np.floor(cols).astype(np.int64), 0, view.width - 1)
        dist = np.linalg.norm(pts[vis] - view.camera_center, axis=1)
        pixels, inverse = np.unique(
            np.stack([pr, pc], axis=1), axis=0, return_inverse=True
        )  # canonical row-major order
        near = np.full(pixels.shape[0], np.inf)
        np.minimum.at(near, inverse, dist)
        # a pixel is a trustworthy seed only if its own line of sight lands
        # at the candidate point's depth (drops limb pixels that actually
        # see the background or an occluder)
        o, d, tn, tf = pixel_rays(view, pixels[:, 0] + 0.5, pixels[:, 1] + 0.5)
        t_pix = surface_depths(fld, o, d, tn, tf, hit_tol=config.hit_tol)
        good = ~np.isnan(t_pix) & (np.abs(t_pix - near) <= 3 * config.delta_vis)
        if not good.any():
            proposals.append(_empty_proposal(view))
            continue
        pixels = pixels[good]
        idx = coreset_select(pixels.astype(np.float64), config.coreset_size)
        seeds = pixels[idx]
        prompt = SegmenterPrompt(view.view_id, [(int(r), int(c), True) for r, c in seeds])
        try:
            result = segmenter.segment(prompt, image=view.image)
        except Exception as exc:  # noqa: BLE001 - surfaced as a segmenter failure
            raise SegmenterError(f"segmenter failed on view {view.view_id}: {exc}") from exc
        mask = np.asarray(result.mask, dtype=bool)
        if mask.shape != (view.height, view.width):
            raise SegmenterError(
                f"segmenter returned mask {mask.shape} for {view.height}x{view.width} view"
            )
        proposals.append(
            ObjectProposal(mask, seeds, float(result.confidence), int(vis.sum()))
        )
    return proposals


def _empty_proposal(view):
    return ObjectProposal(
        np.zeros((view.height, view.width), dtype=bool), np.empty((0, 2), dtype=np.int64)
    )


def depth_order(proposals, fld, view):
    """Resolve overlapping per-object masks into a disjoint set.

    Each overlapping pair goes to the object with more seed points inside
    the overlap; ties fall back to the smaller mean sphere-traced seed depth
    (seeds inside the overlap when present, otherwise all seeds), then to
    the lower object index.
    """
    masks = np.stack([p.mask.copy() for p in proposals]) if proposals else np.zeros((0, 0, 0), bool)
    k = len(proposals)
    depth_cache = {}

    def seed_depths(i, sel=None):
        key = i
        if key not in depth_cache:
            seeds = proposals[i].seeds
            if seeds.shape[0] == 0:
                depth_cache[key] = np.empty(0)
            else:
                o, d, tn, tf = pixel_rays(view, seeds[:, 0] + 0.5, seeds[:, 1] + 0.5)
                depth_cache[key] = surface_depths(fld, o, d, tn, tf)
        depths = depth_cache[key]
        if sel is not None:
            depths = depths[sel]
        depths = depths[~np.isnan(depths)]
        return depths

    for a in range(k):
        for b in range(a + 1, k):
            overlap = masks[a] & masks[b]
            if not overlap.any():
                continue
            in_ov = []
            counts = []
            for i in (a, b):
                seeds = proposals[i].seeds
                inside = (
                    overlap[seeds[:, 0], seeds[:, 1]] if seeds.shape[0] else np.zeros(0, bool)
                )
                in_ov.append(inside)
                counts.append(int(inside.sum()))
            if counts[0] != counts[1]:
                winner = a if counts[0] > counts[1] else b
            else:
                means = []
                for i, inside in zip((a, b), in_ov):
                    d = seed_depths(i, inside if inside.any() else None)
                    means.append(d.mean() if d.size else np.inf)
                if means[0] == means[1]:
                    winner = a
                else:
                    winner = a if means[0] < means[1] else b
            loser = b if winner == a else a
            masks[loser] &= ~overlap
    return masks


@dataclass
class PropagationResult:
    masks: dict  # view_id -> (K, H, W) bool, disjoint
    snapshots: list  # per iteration: dict view_id -> (K, H, W)
    cloud: LabeledPointCloud  # labeled from the final masks
    errors: list = dc_field(default_factory=list)  # (iteration, view_id, message)


def propagate_all(fld, views, anchors, segmenter, config=None):
    """Run the full propagation loop.

    ``anchors`` maps view ids to user-provided (K, H, W) masks; those views
    are label sources and keep their masks. Iteration 1 labels points from
    the anchors alone; later iterations relabel from every view. Failed
    segmenter calls skip the view (previous masks are kept) and are
    recorded. Deterministic for a deterministic segmenter.
    """
    config = config or PropagationConfig()
    by_id = {v.view_id: v for v in views}
    for vid, m in anchors.items():
        if vid not in by_id:
            raise ValueError(f"anchor view {vid} not among the views")
        if np.asarray(m).astype(bool).sum(axis=0).max() > 1:
            raise ValueError(f"anchor masks of view {vid} are not disjoint")
    current = {vid: np.asarray(m, dtype=bool) for vid, m in anchors.items()}
    k_total = next(iter(current.values())).shape[0]
    snapshots = []
    errors = []
    for it in range(config.iterations):
        source_ids = sorted(anchors) if it == 0 else sorted(current)
        cloud = merge_clouds(
            [label_points(fld, by_id[vid], current[vid], config) for vid in source_ids], config
        )
        for view in views:
            if view.view_id in anchors:
                continue
            try:
                proposals = propagate_view(fld, cloud, view, segmenter, config, k_total=k_total)
            except SegmenterError as exc:
                log.warning("iteration %d: %s", it + 1, exc)
                errors.append((it + 1, view.view_id, str(exc)))
                continue
            current[view.view_id] = depth_order(proposals, fld, view)
        snapshots.append({vid: m.copy() for vid, m in current.items()})
    final_cloud = merge_clouds(
        [label_points(fld, by_id[vid], m, config) for vid, m in sorted(current.items())], config
    )
    return PropagationResult(masks=current, snapshots=snapshots, cloud=final_cloud, errors=errors)


class OracleSegmenter:
    """Ground-truth segmenter for synthetic scenes (stands in for a
    promptable model).

    Looks the positive seeds up in the exact object-id map of the view and
    returns the full silhouette of the majority id. ``noise_px`` displaces
    the mask boundary by a smooth random field of at most that many pixels,
    emulating an imperfect model; calls consume the internal rng in order,
    so runs are reproducible per seed.
    """

    def __init__(self, scene, views=None, noise_px=0.0, seed=0):
        self.scene = scene
        self.noise_px = float(noise_px)
        self.rng = np.random.default_rng(seed)
        self._views = {v.view_id: v for v in (views if views is not None else scene.camera_views())}
        self._id_maps = {}

    def _id_map(self, view_id):
        if view_id not in self._id_maps:
            ids, _, _ = scene_synth.render_id_and_depth(self.scene, self._views[view_id])
            self._id_maps[view_id] = ids
        return self._id_maps[view_id]

    def segment(self, prompt, image=None):
        ids = self._id_map(prompt.view_id)
        votes = [
            ids[int(r), int(c)]
            for r, c, positive in prompt.seeds
            if positive and 0 <= int(r) < ids.shape[0] and 0 <= int(c) < ids.shape[1]
        ]
        if not votes:
            return SegmenterResult(np.zeros_like(ids, dtype=bool), 0.0)
        counts = np.bincount(np.asarray(votes) + 1)  # shift so background -1 counts too
        winner = int(np.argmax(counts)) - 1
        if winner < 0:
            return SegmenterResult(np.zeros_like(ids, dtype=bool), 0.0)
        mask = ids == winner
        if self.noise_px > 0 and mask.any() and not mask.all():
            mask = self._perturb(mask)
        return SegmenterResult(mask, 1.0)

    def _perturb(self, mask):
        sd = ndimage.distance_transform_edt(mask) - ndimage.distance_transform_edt(~mask)
        coarse = self.rng.normal(size=(6, 6))
        zoom = (mask.shape[0] / 6, mask.shape[1] / 6)
        fieldn = ndimage.zoom(coarse, zoom, order=3)[: mask.shape[0], : mask.shape[1]]
        fieldn /= max(np.abs(fieldn).max(), 1e-9)
        amp = self.noise_px * self.rng.random() ** 2
        return sd > fieldn * amp
