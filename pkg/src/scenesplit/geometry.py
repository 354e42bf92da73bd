"""Cameras, rays, projection, and occlusion queries.

Conventions: scenes are normalized so cameras and geometry lie in the unit
sphere at the origin; all distances below are in those units. Pixel
coordinates are continuous (row, col) with the origin at the top-left image
corner, so the center of integer pixel (i, j) is (i + 0.5, j + 0.5). The
camera frame is the usual computer-vision one: x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIT_TOL = 1e-3
MAX_STEPS = 128
DELTA_VIS = 1e-2
T_NEAR_EPS = 1e-4


@dataclass
class CameraView:
    """Pinhole intrinsics + world-to-camera pose + image for one viewpoint."""

    view_id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # 4x4 rigid, row-major
    image: np.ndarray | None = None  # HxWx3, linear values in [0,1]

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError(f"view {self.view_id}: rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"view {self.view_id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"view {self.view_id}: principal point outside image")
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.shape != (self.height, self.width, 3):
                raise ValueError(f"view {self.view_id}: image shape mismatch")

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def camera_center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def contains_pixel(self, row, col):
        return (0.0 <= row <= self.height) and (0.0 <= col <= self.width)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("ray must satisfy t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


def unit_sphere_exit(origin, direction):
    """Distance to the unit-sphere boundary along a ray starting inside it."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    b = o @ d
    disc = b * b - (o @ o - 1.0)
    if disc < 0:
        raise ValueError("ray origin lies outside the unit scene sphere")
    return float(-b + np.sqrt(disc))


def pixel_to_ray(view, pixel, offset=(0.0, 0.0)):
    """Backproject a continuous (row, col) pixel position into a world ray.

    The ray starts at the camera center; its t range is clipped to the unit
    scene sphere. Raises ValueError for out-of-bounds pixels.
    """
    row = float(pixel[0]) + float(offset[0])
    col = float(pixel[1]) + float(offset[1])
    if not view.contains_pixel(row, col):
        raise ValueError(f"pixel ({row}, {col}) outside image bounds")
    d_cam = np.array([(col - view.cx) / view.fx, (row - view.cy) / view.fy, 1.0])
    d_world = view.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    origin = view.camera_center
    t_far = unit_sphere_exit(origin, d_world)
    return Ray(origin, d_world, T_NEAR_EPS, t_far)


def pixel_rays(view, rows, cols):
    """Vectorized backprojection: returns (origins, dirs, t_near, t_far) arrays."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    d_cam = np.stack(
        [(cols - view.cx) / view.fx, (rows - view.cy) / view.fy, np.ones_like(rows)], axis=-1
    )
    d = d_cam @ view.rotation  # == (R.T @ d_cam.T).T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = view.camera_center
    b = d @ o
    disc = b * b - (o @ o - 1.0)
    if np.any(disc < 0):
        raise ValueError("camera outside the unit scene sphere")
    t_far = -b + np.sqrt(disc)
    origins = np.broadcast_to(o, d.shape)
    t_near = np.full(d.shape[:-1], T_NEAR_EPS)
    return origins, d, t_near, t_far


def project_point(view, p):
    """Project a world point; returns (row, col, depth).

    Depth is the camera-frame z coordinate. Behind-camera points
    (depth <= 0) get NaN pixel coordinates; this is a flag, not an error.
    """
    p = np.asarray(p, dtype=np.float64)
    cam = view.rotation @ p + view.translation
    depth = cam[2]
    if depth <= 0:
        return np.nan, np.nan, float(depth)
    col = view.fx * cam[0] / depth + view.cx
    row = view.fy * cam[1] / depth + view.cy
    return float(row), float(col), float(depth)


def project_points(view, pts):
    """Vectorized projection: (rows, cols, depths) with NaN pixels behind camera."""
    pts = np.asarray(pts, dtype=np.float64)
    cam = pts @ view.rotation.T + view.translation
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        col = view.fx * cam[:, 0] / depth + view.cx
        row = view.fy * cam[:, 1] / depth + view.cy
    behind = depth <= 0
    row = np.where(behind, np.nan, row)
    col = np.where(behind, np.nan, col)
    return row, col, depth


def surface_depths(
    fld,
    origins,
    dirs,
    t_near,
    t_far,
    hit_tol=HIT_TOL,
    max_steps=MAX_STEPS,
):
    """Sphere-trace a batch of rays against ``fld`` (anything with .query).

    Returns the first t in [t_near, t_far] with |f| < hit_tol per ray, NaN on
    a miss. Overshoots past a sign change are refined by bisection, which
    keeps the tracer robust on trained grids whose gradient norm is only
    approximately one.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t_near, dtype=np.float64)).copy()
    tf = np.broadcast_to(np.asarray(t_far, dtype=np.float64), t.shape)
    n = t.shape[0]
    depth = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)
    t_prev = t.copy()
    cross_lo = np.full(n, np.nan)
    cross_hi = np.full(n, np.nan)

    for _ in range(max_steps):
        if not active.any():
            break
        ia = np.flatnonzero(active)
        f = fld.query(origins[ia] + t[ia, None] * dirs[ia])
        hit = np.abs(f) < hit_tol
        depth[ia[hit]] = t[ia[hit]]
        crossed = (f <= -hit_tol) & ~hit
        cross_lo[ia[crossed]] = t_prev[ia[crossed]]
        cross_hi[ia[crossed]] = t[ia[crossed]]
        active[ia[hit | crossed]] = False
        adv = ~hit & ~crossed
        iadv = ia[adv]
        t_prev[iadv] = t[iadv]
        t[iadv] = t[iadv] + f[adv]
        out = t[iadv] > tf[iadv]
        active[iadv[out]] = False

    # rays that stopped on |f| < hit_tol sit slightly outside the surface;
    # probe a short bracket forward so transversal hits land on the sign
    # change instead of carrying a positive-side bias
    ih = np.flatnonzero(~np.isnan(depth) & ~np.isfinite(cross_lo))
    if ih.size:
        f_here = fld.query(origins[ih] + depth[ih, None] * dirs[ih])
        probe = ih[f_here > 0]
        if probe.size:
            step = hit_tol / 2
            offsets = step * np.arange(1, 9)
            fprobe = np.stack(
                [
                    fld.query(origins[probe] + (depth[probe] + off)[:, None] * dirs[probe])
                    for off in offsets
                ],
                axis=1,
            )
            neg_any = (fprobe < 0).any(axis=1)
            first_neg = np.argmax(fprobe < 0, axis=1)
            sel = np.flatnonzero(neg_any)
            if sel.size:
                rays = probe[sel]
                k = first_neg[sel]
                cross_lo[rays] = depth[rays] + np.where(k > 0, offsets[k - 1], 0.0)
                cross_hi[rays] = depth[rays] + offsets[k]

    # bisection refinement for rays with a bracketed sign change
    ic = np.flatnonzero(np.isfinite(cross_lo))
    if ic.size:
        lo = cross_lo[ic]
        hi = cross_hi[ic]
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            fm = fld.query(origins[ic] + mid[:, None] * dirs[ic])
            neg = fm < 0
            hi = np.where(neg, mid, hi)
            lo = np.where(neg, lo, mid)
        depth[ic] = 0.5 * (lo + hi)
    return depth


def surface_depth(fld, ray, hit_tol=HIT_TOL, max_steps=MAX_STEPS):
    """Single-ray sphere tracing; returns depth or None on a miss."""
    d = surface_depths(
        fld,
        ray.origin[None],
        ray.direction[None],
        np.array([ray.t_near]),
        np.array([ray.t_far]),
        hit_tol=hit_tol,
        max_steps=max_steps,
    )[0]
    return None if np.isnan(d) else float(d)


def is_visible(fld, view, p, hit_tol=HIT_TOL, delta_vis=DELTA_VIS):
    """True iff ``p`` is unoccluded in ``view`` according to the scene field.

    Projects the point; behind-camera or out-of-image points are not visible.
    Otherwise the pixel ray is sphere-traced and the point counts as visible
    when the first surface is no closer than the point minus delta_vis.
    """
    row, col, depth = project_point(view, p)
    if depth <= 0 or not view.contains_pixel(row, col):
        return False
    o = view.camera_center
    v = np.asarray(p, dtype=np.float64) - o
    t_p = np.linalg.norm(v)
    if t_p == 0.0:
        return True
    d = v / t_p
    t_far = unit_sphere_exit(o, d)
    t_hit = surface_depths(
        fld, o[None], d[None], np.array([T_NEAR_EPS]), np.array([t_far]), hit_tol=hit_tol
    )[0]
    if np.isnan(t_hit):
        return True
    return bool(t_hit >= t_p - delta_vis)


def visible_mask(fld, view, pts, hit_tol=HIT_TOL, delta_vis=DELTA_VIS):
    """Vectorized is_visible over an (N,3) point array."""
    pts = np.asarray(pts, dtype=np.float64)
    rows, cols, depths = project_points(view, pts)
    ok = (depths > 0) & (rows >= 0) & (rows <= view.height) & (cols >= 0) & (cols <= view.width)
    out = np.zeros(pts.shape[0], dtype=bool)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return out
    o = view.camera_center
    v = pts[idx] - o
    t_p = np.linalg.norm(v, axis=-1)
    d = v / t_p[:, None]
    b = d @ o
    t_far = -b + np.sqrt(np.maximum(b * b - (o @ o - 1.0), 0.0))
    t_hit = surface_depths(
        fld, np.broadcast_to(o, d.shape), d, np.full(idx.size, T_NEAR_EPS), t_far, hit_tol=hit_tol
    )
    out[idx] = np.isnan(t_hit) | (t_hit >= t_p - delta_vis)
    return out
