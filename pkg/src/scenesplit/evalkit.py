"""Mesh extraction, density-equalized sampling, and benchmark metrics.

Predicted meshes are never clipped to ground-truth bounds; floaters must
show up in the precision ratio. Point densities are equalized instead by
rejection sampling with a minimum pairwise radius, so meshes of very
different area are compared fairly.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .field import VoxelGrid

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
DEFAULT_TAU = 0.01


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")

    @property
    def is_empty(self):
        return self.triangles.shape[0] == 0

    def triangle_areas(self):
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=-1)

    def area(self):
        return float(self.triangle_areas().sum())

    def euler_characteristic(self):
        edges = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        used = np.unique(self.triangles)
        return int(used.size - edges.shape[0] + self.triangles.shape[0])


@dataclass
class MetricReport:
    chamfer: float
    precision_ratio: float
    completion_ratio: float
    tau: float
    n_pred: int
    n_gt: int
    per_object: list = dc_field(default_factory=list)
    empty_prediction: bool = False

    def to_dict(self):
        d = {
            "chamfer": self.chamfer,
            "precision_ratio": self.precision_ratio,
            "completion_ratio": self.completion_ratio,
            "tau": self.tau,
            "n_pred": self.n_pred,
            "n_gt": self.n_gt,
            "empty_prediction": self.empty_prediction,
        }
        if self.per_object:
            d["per_object"] = [o.to_dict() if hasattr(o, "to_dict") else o for o in self.per_object]
        return d


def extract_mesh(fld, resolution=None, level=0.0, bounds=None):
    """Marching cubes over the zero level set of ``fld``.

    ``fld`` is a voxel grid or anything with a vectorized ``query``. The
    surface is sampled at voxel centers of the requested resolution over the
    field bounds; vertices are linearly interpolated along cell edges. A
    field without a sign change yields an empty mesh (with a warning).
    """
    if isinstance(fld, VoxelGrid) and (resolution is None or tuple(np.broadcast_to(resolution, (3,))) == fld.resolution) and bounds is None:
        values = fld.values
        lo, hi = fld.lo, fld.hi
        res = fld.resolution
    else:
        if resolution is None:
            raise ValueError("resolution required for non-grid fields")
        res = tuple(int(r) for r in np.broadcast_to(resolution, (3,)))
        if bounds is not None:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        elif isinstance(fld, VoxelGrid):
            lo, hi = fld.lo, fld.hi
        else:
            raise ValueError("bounds required for non-grid fields")
        h = (hi - lo) / np.asarray(res)
        axes = [lo[a] + (np.arange(res[a]) + 0.5) * h[a] for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        values = fld.query(pts).reshape(res)
    h = (np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)) / np.asarray(res)
    if not (values.min() < level < values.max()):
        log.warning("extract_mesh: no sign change at level %.3g; empty mesh", level)
        return TriMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    verts, faces, normals, _ = measure.marching_cubes(values, level=level, spacing=tuple(h))
    verts = verts + (np.asarray(lo) + 0.5 * h)
    mesh = TriMesh(verts, faces, normals)
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    if not keep.all():
        mesh = TriMesh(mesh.vertices, mesh.triangles[keep], mesh.normals)
    return mesh


def sample_surface(mesh, count, rng):
    """Area-weighted uniform samples on the mesh surface."""
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(probs), size=count, p=probs)
    u = rng.random((count, 1))
    v = rng.random((count, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    return a + u * (b - a) + v * (c - a)


def rejection_sample(mesh, count, radius, seed=0, batch=4096):
    """Surface samples with a minimum pairwise distance of ``radius``.

    Candidates are drawn area-weighted and accepted only when at least
    ``radius`` from every accepted point; sampling stops at ``count`` or at
    saturation, when the surface cannot hold more points. Deterministic per
    seed. Equal radii give different meshes matching local point densities.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if mesh.is_empty:
        return np.empty((0, 3))
    rng = np.random.default_rng(seed)
    accepted = []
    cells = {}
    inv = 1.0 / radius
    r2 = radius * radius
    tried_since_accept = 0
    budget = max(50 * count, 100_000)
    total = 0

    def cell_of(p):
        return (int(np.floor(p[0] * inv)), int(np.floor(p[1] * inv)), int(np.floor(p[2] * inv)))

    while len(accepted) < count and total < budget and tried_since_accept < 25_000:
        cands = sample_surface(mesh, batch, rng)
        total += batch
        for p in cands:
            if len(accepted) >= count:
                break
            cx, cy, cz = cell_of(p)
            ok = True
            for nx in range(cx - 1, cx + 2):
                for ny in range(cy - 1, cy + 2):
                    for nz in range(cz - 1, cz + 2):
                        for q in cells.get((nx, ny, nz), ()):
                            dq = p - q
                            if dq @ dq < r2:
                                ok = False
                                break
                        if not ok:
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                accepted.append(p)
                cells.setdefault((cx, cy, cz), []).append(p)
                tried_since_accept = 0
            else:
                tried_since_accept += 1
    return np.asarray(accepted) if accepted else np.empty((0, 3))


def chamfer(pred, gt):
    """Two-way Chamfer: mean NN distance pred->gt plus mean NN gt->pred."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("chamfer needs two nonempty clouds")
    d_pg, _ = cKDTree(gt).query(pred)
    d_gp, _ = cKDTree(pred).query(gt)
    return float(d_pg.mean() + d_gp.mean())


def precision_completion(pred, gt, tau):
    """Fraction of pred points within tau of gt and vice versa.

    Empty predictions yield precision 0 (flagged by the caller via shape);
    an empty ground truth is an error.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if gt.shape[0] == 0:
        raise ValueError("ground-truth cloud is empty")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0:
        log.warning("precision over an empty prediction reported as 0")
        return 0.0, 0.0
    d_pg, _ = cKDTree(gt).query(pred)
    d_gp, _ = cKDTree(pred).query(gt)
    return float(np.mean(d_pg <= tau)), float(np.mean(d_gp <= tau))


def evaluate_pair(pred_mesh, gt_mesh, tau=DEFAULT_TAU, target=100_000, radius=None, seed=0):
    """Full metric protocol for one predicted/ground-truth mesh pair."""
    r = tau / 2 if radius is None else radius
    pred_pts = rejection_sample(pred_mesh, target, r, seed=seed)
    gt_pts = rejection_sample(gt_mesh, target, r, seed=seed + 1)
    if pred_pts.shape[0] == 0:
        return MetricReport(
            chamfer=float("inf"),
            precision_ratio=0.0,
            completion_ratio=0.0,
            tau=tau,
            n_pred=0,
            n_gt=gt_pts.shape[0],
            empty_prediction=True,
        )
    prec, comp = precision_completion(pred_pts, gt_pts, tau)
    return MetricReport(
        chamfer=chamfer(pred_pts, gt_pts),
        precision_ratio=prec,
        completion_ratio=comp,
        tau=tau,
        n_pred=pred_pts.shape[0],
        n_gt=gt_pts.shape[0],
    )


def mask_miou(pred_masksets, gt_masksets):
    """Mean IoU per object, then over views; empty-vs-empty counts as 1."""
    if len(pred_masksets) != len(gt_masksets) or not pred_masksets:
        raise ValueError("mask sets must pair up view for view")
    per_view = []
    for pred, gt in zip(pred_masksets, gt_masksets):
        p = np.asarray(pred, dtype=bool)
        g = np.asarray(gt, dtype=bool)
        if p.shape != g.shape:
            raise ValueError("mask shape mismatch")
        ious = []
        for k in range(p.shape[0]):
            union = np.logical_or(p[k], g[k]).sum()
            if union == 0:
                ious.append(1.0)
            else:
                ious.append(np.logical_and(p[k], g[k]).sum() / union)
        per_view.append(float(np.mean(ious)))
    return float(np.mean(per_view))


# -- mesh and report I/O ---------------------------------------------------------


def save_obj(path, mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64))


def save_stl(path, mesh):
    tris = mesh.vertices[mesh.triangles]
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 0, n / np.maximum(norm, 1e-30), 0.0)
    with open(path, "wb") as fh:
        fh.write(b"\x00" * 80)
        fh.write(struct.pack("<I", len(tris)))
        for i in range(len(tris)):
            fh.write(struct.pack("<3f", *n[i].astype(np.float32)))
            for v in tris[i]:
                fh.write(struct.pack("<3f", *v.astype(np.float32)))
            fh.write(struct.pack("<H", 0))


def load_stl(path):
    with open(path, "rb") as fh:
        fh.read(80)
        (count,) = struct.unpack("<I", fh.read(4))
        verts = np.empty((count * 3, 3), dtype=np.float64)
        for i in range(count):
            fh.read(12)  # normal
            for j in range(3):
                verts[i * 3 + j] = struct.unpack("<3f", fh.read(12))
            fh.read(2)
    tris = np.arange(count * 3, dtype=np.int64).reshape(-1, 3)
    return TriMesh(verts, tris)


def write_report_json(path, reports):
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def write_report_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object", "chamfer", "precision_ratio", "completion_ratio", "tau", "n_pred", "n_gt"])
        for name, rep in reports.items():
            w.writerow([name, rep.chamfer, rep.precision_ratio, rep.completion_ratio, rep.tau, rep.n_pred, rep.n_gt])
