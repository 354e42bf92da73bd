"""Optimizable voxel fields and analytic signed-distance oracles.

The geometry backbone is a dense voxel grid with trilinear interpolation.
Gradients of every query are hand-derived so the whole training stack can be
checked against finite differences. Analytic primitives (sphere, box, plane,
cylinder, unions, rigid transforms) provide exact ground truth for tests and
for the synthetic scene generator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

FIELD_MAGIC = b"SSFIELD1"
FIELD_VERSION = 1


class GradientPassError(RuntimeError):
    """Raised when gradient accumulation is used without an open pass."""


def _as_points(p):
    p = np.asarray(p, dtype=np.float64)
    squeeze = p.ndim == 1
    return np.atleast_2d(p), squeeze


class VoxelGrid:
    """Dense grid over an axis-aligned box, sampled at voxel centers.

    Values live at centers ``lo + (i + 0.5) * h``. Queries outside the bounds
    clamp to the boundary value, so the interpolant is defined everywhere.
    """

    def __init__(self, resolution, bounds, values=None, channels=1):
        self.resolution = tuple(int(r) for r in resolution)
        if any(r < 2 for r in self.resolution):
            raise ValueError("resolution must be >= 2 per axis")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        if not np.all(hi > lo):
            raise ValueError("bounds must satisfy hi > lo")
        self.lo = lo
        self.hi = hi
        self.channels = int(channels)
        shape = self.resolution if channels == 1 else (*self.resolution, channels)
        if values is None:
            self.values = np.zeros(shape, dtype=np.float64)
        else:
            self.values = np.ascontiguousarray(values, dtype=np.float64).reshape(shape)
        self.grad = None  # dense accumulator, same shape; None = no open pass
        self._touched = []

    @property
    def voxel_size(self):
        return (self.hi - self.lo) / np.asarray(self.resolution, dtype=np.float64)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))

    def voxel_centers(self):
        axes = [
            self.lo[a] + (np.arange(self.resolution[a]) + 0.5) * self.voxel_size[a]
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def _locate(self, p):
        """Map points to cell indices and in-cell fractions (clamped)."""
        h = self.voxel_size
        x = (p - self.lo) / h - 0.5
        res = np.asarray(self.resolution)
        x = np.clip(x, 0.0, res - 1.0)
        i0 = np.minimum(np.floor(x).astype(np.int64), res - 2)
        t = x - i0
        return i0, t

    def _corner_indices(self, i0):
        rx, ry, rz = self.resolution
        base = ((i0[:, 0] * ry + i0[:, 1]) * rz + i0[:, 2]).astype(np.int32)
        # corner order: (dx, dy, dz) bits of 0..7
        offs = np.array(
            [(dx * ry + dy) * rz + dz for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
            dtype=np.int32,
        )
        return base[:, None] + offs[None, :]

    @staticmethod
    def _weights(t):
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        wx = np.stack([1.0 - tx, tx], axis=1)
        wy = np.stack([1.0 - ty, ty], axis=1)
        wz = np.stack([1.0 - tz, tz], axis=1)
        return (
            wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
        ).reshape(-1, 8)

    @staticmethod
    def _dweights(t):
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        wx = np.stack([1.0 - tx, tx], axis=1)
        wy = np.stack([1.0 - ty, ty], axis=1)
        wz = np.stack([1.0 - tz, tz], axis=1)
        sx = np.array([-1.0, 1.0])
        dwx = (
            sx[None, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
        ).reshape(-1, 8)
        dwy = (
            wx[:, :, None, None] * sx[None, None, :, None] * wz[:, None, None, :]
        ).reshape(-1, 8)
        dwz = (
            wx[:, :, None, None] * wy[:, None, :, None] * sx[None, None, None, :]
        ).reshape(-1, 8)
        return dwx, dwy, dwz

    def _corner_data(self, p):
        """Flat corner indices [N,8], weights [N,8], and d(weight)/dt per axis."""
        i0, t = self._locate(p)
        idx = self._corner_indices(i0)
        return idx, self._weights(t), self._dweights(t)

    def query(self, p):
        """Trilinear interpolation of the stored values at ``p``."""
        out, _ = self.query_cached(p)
        return out

    def query_cached(self, p):
        """Query plus the (indices, weights) cache reusable by the backward."""
        pts, squeeze = _as_points(p)
        i0, t = self._locate(pts)
        idx = self._corner_indices(i0)
        w = self._weights(t)
        if self.channels == 1:
            out = np.einsum("nc,nc->n", self.values.ravel()[idx], w)
        else:
            # per-channel gathers beat one (N, 8, C) gather by a wide margin
            flat = self.values.reshape(-1, self.channels)
            out = np.empty((pts.shape[0], self.channels))
            for ch in range(self.channels):
                out[:, ch] = np.einsum("nc,nc->n", flat[:, ch][idx], w)
        return (out[0] if squeeze else out), (idx, w)

    def spatial_gradient(self, p):
        """Analytic gradient of the interpolant; piecewise per cell."""
        g, _ = self.gradient_cached(p)
        return g

    def gradient_cached(self, p):
        """Gradient plus the (indices, dweights) cache for the backward."""
        pts, squeeze = _as_points(p)
        if self.channels != 1:
            raise ValueError("spatial_gradient is defined for scalar grids")
        i0, t = self._locate(pts)
        idx = self._corner_indices(i0)
        dwx, dwy, dwz = self._dweights(t)
        vals = self.values.ravel()[idx]
        h = self.voxel_size
        g = np.stack(
            [
                np.einsum("nc,nc->n", vals, dwx) / h[0],
                np.einsum("nc,nc->n", vals, dwy) / h[1],
                np.einsum("nc,nc->n", vals, dwz) / h[2],
            ],
            axis=-1,
        )
        return (g[0] if squeeze else g), (idx, dwx, dwy, dwz)

    # -- gradient accumulation -------------------------------------------------

    def zero_grad(self):
        """Open (or reset) a gradient accumulation pass."""
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        elif self._touched:
            # only entries written in the previous pass can be nonzero
            idx = np.concatenate(self._touched)
            if self.channels > 1:
                self.grad.reshape(-1, self.channels)[idx] = 0.0
            else:
                self.grad.reshape(-1)[idx] = 0.0
        self._touched = []

    def _require_pass(self):
        if self.grad is None:
            raise GradientPassError("no open gradient accumulation pass; call zero_grad()")

    def backprop_query(self, p, upstream):
        """Accumulate d(query)/d(values) * upstream into the gradient pass."""
        pts, _ = _as_points(p)
        i0, t = self._locate(pts)
        self.backprop_query_cached((self._corner_indices(i0), self._weights(t)), upstream)

    def backprop_query_cached(self, cache, upstream):
        """backprop_query reusing the cache of a prior query_cached call."""
        self._require_pass()
        idx, w = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if self.channels == 1:
            up = np.broadcast_to(upstream, (idx.shape[0],))
            np.add.at(self.grad.ravel(), idx.ravel(), (w * up[:, None]).ravel())
        else:
            up = np.broadcast_to(upstream, (idx.shape[0], self.channels))
            gflat = self.grad.reshape(-1, self.channels)
            for ch in range(self.channels):
                np.add.at(gflat[:, ch], idx.ravel(), (w * up[:, ch][:, None]).ravel())
        self._touched.append(idx.ravel())

    def backprop_gradient(self, p, upstream):
        """Accumulate d(spatial_gradient)/d(values) . upstream (3-vector per point)."""
        if self.channels != 1:
            raise ValueError("backprop_gradient is defined for scalar grids")
        pts, _ = _as_points(p)
        i0, t = self._locate(pts)
        self.backprop_gradient_cached((self._corner_indices(i0), *self._dweights(t)), upstream)

    def backprop_gradient_cached(self, cache, upstream):
        self._require_pass()
        idx, dwx, dwy, dwz = cache
        up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        h = self.voxel_size
        contrib = (
            dwx * (up[:, 0] / h[0])[:, None]
            + dwy * (up[:, 1] / h[1])[:, None]
            + dwz * (up[:, 2] / h[2])[:, None]
        )
        np.add.at(self.grad.ravel(), idx.ravel(), contrib.ravel())
        self._touched.append(idx.ravel())

    def touched_indices(self):
        """Sorted unique flat indices touched in the open pass."""
        self._require_pass()
        if not self._touched:
            return np.empty(0, dtype=np.int32)
        s = np.sort(np.concatenate(self._touched))
        keep = np.concatenate(([True], s[1:] != s[:-1]))
        return s[keep]

    def clone(self):
        out = self.__class__.__new__(self.__class__)
        out.resolution = self.resolution
        out.lo = self.lo.copy()
        out.hi = self.hi.copy()
        out.channels = self.channels
        out.values = self.values.copy()
        out.grad = None
        out._touched = []
        return out


class SdfField(VoxelGrid):
    """Signed-distance voxel grid; the optimizable geometry."""

    def __init__(self, resolution, bounds, values=None):
        super().__init__(resolution, bounds, values, channels=1)

    @classmethod
    def from_function(cls, fn, resolution, bounds):
        """Fit by direct assignment of ``fn`` at voxel centers."""
        f = cls(resolution, bounds)
        centers = f.voxel_centers().reshape(-1, 3)
        f.values = fn(centers).reshape(f.resolution).astype(np.float64)
        return f

    def clamp_values(self):
        """Enforce |values| <= bounds diameter (invariant after optimizer steps)."""
        d = self.diameter
        np.clip(self.values, -d, d, out=self.values)


class ColorField(VoxelGrid):
    """RGB voxel grid in [0,1]; view-independent appearance."""

    def __init__(self, resolution, bounds, values=None):
        super().__init__(resolution, bounds, values, channels=3)

    @classmethod
    def constant(cls, resolution, bounds, rgb=(0.5, 0.5, 0.5)):
        f = cls(resolution, bounds)
        f.values[...] = np.asarray(rgb, dtype=np.float64)
        return f

    def clamp_values(self):
        np.clip(self.values, 0.0, 1.0, out=self.values)


@dataclass
class ObjectFieldSet:
    """K per-object (sdf, color) pairs sharing one trainable sharpness scalar."""

    sdfs: list
    colors: list
    sharpness: float = 30.0

    S_MIN = 1e-2

    def __post_init__(self):
        if len(self.sdfs) != len(self.colors):
            raise ValueError("sdf/color counts differ")
        res = self.sdfs[0].resolution
        lo, hi = self.sdfs[0].lo, self.sdfs[0].hi
        for f in [*self.sdfs, *self.colors]:
            if f.resolution != res or not (np.array_equal(f.lo, lo) and np.array_equal(f.hi, hi)):
                raise ValueError("all object fields must share resolution and bounds")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")

    @property
    def k(self):
        return len(self.sdfs)

    def clamp_sharpness(self):
        self.sharpness = max(self.sharpness, self.S_MIN)


# -- analytic primitives (test oracles and synthetic ground truth) -------------


class AnalyticSdf:
    """Base for closed-form signed-distance primitives.

    ``query`` returns the signed distance (exact for sphere/plane/cylinder,
    a lower bound inside box unions). ``raycast`` returns the exact first-hit
    distance per ray, or +inf on a miss.
    """

    def query(self, p):
        pts, squeeze = _as_points(p)
        d = self._sdf(pts)
        return d[0] if squeeze else d

    def raycast(self, origins, dirs, t_min=0.0, t_max=np.inf):
        o, squeeze = _as_points(origins)
        d, _ = _as_points(dirs)
        t = self._raycast(o, np.broadcast_to(d, o.shape))
        t = np.where((t >= t_min) & (t <= t_max), t, np.inf)
        return t[0] if squeeze else t

    def _sdf(self, p):
        raise NotImplementedError

    def _raycast(self, o, d):
        raise NotImplementedError


class Sphere(AnalyticSdf):
    kind = "sphere"

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def _sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def _raycast(self, o, d):
        oc = o - self.center
        b = np.einsum("nd,nd->n", oc, d)
        c = np.einsum("nd,nd->n", oc, oc) - self.radius**2
        disc = b * b - c
        t = np.full(o.shape[0], np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        near = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        t[ok] = near[ok]
        return t


class Box(AnalyticSdf):
    kind = "box"

    def __init__(self, center, half_extents):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half_extents, dtype=np.float64)

    def _sdf(self, p):
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def _raycast(self, o, d):
        # slab method
        lo = self.center - self.half
        hi = self.center + self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        # axis-parallel rays: valid iff origin within the slab
        par = d == 0.0
        inside_slab = (o >= lo) & (o <= hi)
        t0 = np.where(par, np.where(inside_slab, -np.inf, np.inf), t0)
        t1 = np.where(par, np.where(inside_slab, np.inf, -np.inf), t1)
        tn = np.max(np.minimum(t0, t1), axis=-1)
        tf = np.min(np.maximum(t0, t1), axis=-1)
        hit = (tn <= tf) & (tf > 0)
        t = np.where(tn > 0, tn, tf)
        return np.where(hit, t, np.inf)


class Plane(AnalyticSdf):
    kind = "plane"

    def __init__(self, normal, offset):
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)

    def _sdf(self, p):
        return p @ self.normal - self.offset

    def _raycast(self, o, d):
        denom = d @ self.normal
        num = self.offset - o @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        return np.where((denom != 0) & (t > 0), t, np.inf)


class Cylinder(AnalyticSdf):
    """Capped cylinder with axis along +y."""

    kind = "cylinder"

    def __init__(self, center, radius, half_height):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.half_height = float(half_height)

    def _sdf(self, p):
        q = p - self.center
        radial = np.linalg.norm(q[..., [0, 2]], axis=-1) - self.radius
        axial = np.abs(q[..., 1]) - self.half_height
        qq = np.stack([radial, axial], axis=-1)
        outside = np.linalg.norm(np.maximum(qq, 0.0), axis=-1)
        inside = np.minimum(np.max(qq, axis=-1), 0.0)
        return outside + inside

    def _raycast(self, o, d):
        q = o - self.center
        # infinite-cylinder interval in the xz plane
        a = d[:, 0] ** 2 + d[:, 2] ** 2
        b = q[:, 0] * d[:, 0] + q[:, 2] * d[:, 2]
        c = q[:, 0] ** 2 + q[:, 2] ** 2 - self.radius**2
        t_side0 = np.full(o.shape[0], -np.inf)
        t_side1 = np.full(o.shape[0], np.inf)
        quad = a > 0
        disc = b * b - a * c
        ok = quad & (disc >= 0)
        sq = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_side0 = np.where(ok, (-b - sq) / a, t_side0)
            t_side1 = np.where(ok, (-b + sq) / a, t_side1)
        miss_side = quad & (disc < 0)
        outside_radial = ~quad & (c > 0)
        # axis-parallel rays outside the radius never hit
        dead = miss_side | outside_radial
        # cap slab interval in y
        par_y = d[:, 1] == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ty0 = (-self.half_height - q[:, 1]) / d[:, 1]
            ty1 = (self.half_height - q[:, 1]) / d[:, 1]
        in_slab = np.abs(q[:, 1]) <= self.half_height
        ty0 = np.where(par_y, np.where(in_slab, -np.inf, np.inf), ty0)
        ty1 = np.where(par_y, np.where(in_slab, np.inf, -np.inf), ty1)
        tn = np.maximum(t_side0, np.minimum(ty0, ty1))
        tf = np.minimum(t_side1, np.maximum(ty0, ty1))
        hit = ~dead & (tn <= tf) & (tf > 0)
        t = np.where(tn > 0, tn, tf)
        return np.where(hit, t, np.inf)


class Union(AnalyticSdf):
    kind = "union"

    def __init__(self, children):
        self.children = list(children)
        if not self.children:
            raise ValueError("union needs at least one child")

    def _sdf(self, p):
        return np.min([c._sdf(p) for c in self.children], axis=0)

    def _raycast(self, o, d):
        return np.min([c._raycast(o, d) for c in self.children], axis=0)


class Transformed(AnalyticSdf):
    """Rigidly transformed child; rigid maps preserve signed distance."""

    kind = "transformed"

    def __init__(self, child, rotation=None, translation=(0.0, 0.0, 0.0)):
        self.child = child
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        self.translation = np.asarray(translation, dtype=np.float64)

    def _to_local(self, p):
        return (p - self.translation) @ self.rotation

    def _sdf(self, p):
        return self.child._sdf(self._to_local(p))

    def _raycast(self, o, d):
        return self.child._raycast(self._to_local(o), d @ self.rotation)


# -- checkpoint I/O -------------------------------------------------------------

_HEADER = struct.Struct("<8sII3I6d")


def save_field(path, grid):
    """Write header (magic, version, channels, resolution, bounds) + f32 payload."""
    payload = grid.values.astype("<f4").tobytes(order="C")
    header = _HEADER.pack(
        FIELD_MAGIC,
        FIELD_VERSION,
        grid.channels,
        *grid.resolution,
        *grid.lo,
        *grid.hi,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_field(path):
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError(f"{path}: truncated field header")
        magic, version, channels, rx, ry, rz, *bounds = _HEADER.unpack(raw)
        if magic != FIELD_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != FIELD_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        count = rx * ry * rz * channels
        payload = np.frombuffer(fh.read(count * 4), dtype="<f4")
        if payload.size != count:
            raise ValueError(f"{path}: truncated payload")
    lo, hi = bounds[:3], bounds[3:]
    cls = SdfField if channels == 1 else ColorField
    return cls((rx, ry, rz), (lo, hi), payload.astype(np.float64))
