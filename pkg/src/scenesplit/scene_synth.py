"""Deterministic synthetic scenes with closed-form ground truth.

Each catalog scene is a set of analytic primitives with flat albedos,
observed from rings of cameras inside the unit scene sphere. Ground truth
(images, per-object masks, depth, meshes) comes from exact ray casting, so
every other module can be tested against it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import field as fld
from .evalkit import extract_mesh
from .geometry import CameraView, pixel_rays

LIGHT_DIR = np.array([0.35, 0.85, 0.4])
AMBIENT = 0.35
DIFFUSE = 0.65

GT_MESH_RESOLUTION = 256


@dataclass
class SceneObject:
    name: str
    shape: fld.AnalyticSdf
    albedo: tuple

    def to_dict(self):
        return {"name": self.name, "shape": shape_to_dict(self.shape), "albedo": list(self.albedo)}


@dataclass
class CameraRing:
    count: int
    elevation_deg: float
    radius: float
    azimuth0_deg: float = 0.0


@dataclass
class SyntheticScene:
    name: str
    objects: list
    rings: list
    image_size: int = 64
    fov_half_deg: float = 42.0
    seed: int = 0

    def __post_init__(self):
        for ring in self.rings:
            if not 0 < ring.radius < 1:
                raise ValueError("camera rings must lie strictly inside the unit sphere")

    @property
    def k(self):
        return len(self.objects)

    def composite(self):
        return fld.Union([o.shape for o in self.objects])

    def camera_views(self):
        views = []
        size = self.image_size
        f = (size / 2.0) / np.tan(np.deg2rad(self.fov_half_deg))
        idx = 0
        for ring in self.rings:
            el = np.deg2rad(ring.elevation_deg)
            for i in range(ring.count):
                az = np.deg2rad(ring.azimuth0_deg) + 2 * np.pi * i / ring.count
                eye = ring.radius * np.array(
                    [np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)]
                )
                views.append(
                    CameraView(
                        view_id=f"view_{idx:03d}",
                        width=size,
                        height=size,
                        fx=f,
                        fy=f,
                        cx=size / 2.0,
                        cy=size / 2.0,
                        world_to_camera=look_at(eye),
                    )
                )
                idx += 1
        return views

    def to_dict(self):
        return {
            "name": self.name,
            "image_size": self.image_size,
            "fov_half_deg": self.fov_half_deg,
            "seed": self.seed,
            "objects": [o.to_dict() for o in self.objects],
            "rings": [
                {
                    "count": r.count,
                    "elevation_deg": r.elevation_deg,
                    "radius": r.radius,
                    "azimuth0_deg": r.azimuth0_deg,
                }
                for r in self.rings
            ],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            objects=[
                SceneObject(o["name"], shape_from_dict(o["shape"]), tuple(o["albedo"]))
                for o in d["objects"]
            ],
            rings=[
                CameraRing(r["count"], r["elevation_deg"], r["radius"], r.get("azimuth0_deg", 0.0))
                for r in d["rings"]
            ],
            image_size=d["image_size"],
            fov_half_deg=d["fov_half_deg"],
            seed=d["seed"],
        )


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    pose = np.eye(4)
    pose[:3, :3] = R
    pose[:3, 3] = -R @ eye
    return pose


def shape_to_dict(shape):
    if isinstance(shape, fld.Sphere):
        return {"kind": "sphere", "center": shape.center.tolist(), "radius": shape.radius}
    if isinstance(shape, fld.Box):
        return {"kind": "box", "center": shape.center.tolist(), "half": shape.half.tolist()}
    if isinstance(shape, fld.Plane):
        return {"kind": "plane", "normal": shape.normal.tolist(), "offset": shape.offset}
    if isinstance(shape, fld.Cylinder):
        return {
            "kind": "cylinder",
            "center": shape.center.tolist(),
            "radius": shape.radius,
            "half_height": shape.half_height,
        }
    if isinstance(shape, fld.Union):
        return {"kind": "union", "children": [shape_to_dict(c) for c in shape.children]}
    if isinstance(shape, fld.Transformed):
        return {
            "kind": "transformed",
            "child": shape_to_dict(shape.child),
            "rotation": shape.rotation.tolist(),
            "translation": shape.translation.tolist(),
        }
    raise ValueError(f"unknown shape {type(shape)!r}")


def shape_from_dict(d):
    kind = d["kind"]
    if kind == "sphere":
        return fld.Sphere(d["center"], d["radius"])
    if kind == "box":
        return fld.Box(d["center"], d["half"])
    if kind == "plane":
        return fld.Plane(d["normal"], d["offset"])
    if kind == "cylinder":
        return fld.Cylinder(d["center"], d["radius"], d["half_height"])
    if kind == "union":
        return fld.Union([shape_from_dict(c) for c in d["children"]])
    if kind == "transformed":
        return fld.Transformed(shape_from_dict(d["child"]), d["rotation"], d["translation"])
    raise ValueError(f"unknown shape kind {kind!r}")


@dataclass
class GroundTruthView:
    view: CameraView  # carries the rendered image
    masks: np.ndarray  # (K, H, W) bool, pairwise disjoint
    depth: np.ndarray  # (H, W), NaN where no hit
    id_map: np.ndarray  # (H, W) int, -1 = background


def render_id_and_depth(scene, view):
    """Exact per-pixel nearest-object raycast for one view."""
    size = scene.image_size
    rr, cc = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    o, d, tn, tf = pixel_rays(view, rr.ravel(), cc.ravel())
    if scene.k == 0:
        empty = np.full(size * size, -1, dtype=np.int64)
        return empty.reshape(size, size), np.full((size, size), np.nan), (o, d)
    hits = np.stack([obj.shape.raycast(o, d) for obj in scene.objects], axis=0)
    hits = np.where(hits <= tf[None, :], hits, np.inf)  # clip to the unit scene sphere
    nearest = np.min(hits, axis=0)
    ids = np.where(np.isfinite(nearest), np.argmin(hits, axis=0), -1)
    depth = np.where(np.isfinite(nearest), nearest, np.nan)
    return ids.reshape(size, size), depth.reshape(size, size), (o, d)


def render_ground_truth(scene, with_meshes=False):
    """Closed-form renders: images, disjoint masks, depth, optional meshes.

    Flat Lambertian shading with a fixed directional light on a black
    background; no volume rendering is involved, so these are independent
    oracles for the differentiable renderer.
    """
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    composite = scene.composite() if scene.k else None
    out = []
    for view in scene.camera_views():
        ids, depth, (o, d) = render_id_and_depth(scene, view)
        size = scene.image_size
        img = np.zeros((size * size, 3))
        flat_ids = ids.ravel()
        flat_depth = depth.ravel()
        hit = flat_ids >= 0
        if hit.any():
            p = o[hit] + flat_depth[hit][:, None] * d[hit]
            n = _numeric_normal(composite, p)
            lam = np.maximum(n @ light, 0.0)
            shade = AMBIENT + DIFFUSE * lam
            albedos = np.array([obj.albedo for obj in scene.objects])
            img[hit] = albedos[flat_ids[hit]] * shade[:, None]
        img = np.clip(img.reshape(size, size, 3), 0.0, 1.0)
        if scene.k:
            masks = np.stack([ids == k for k in range(scene.k)], axis=0)
        else:
            masks = np.zeros((0, size, size), dtype=bool)
        view.image = img
        out.append(GroundTruthView(view=view, masks=masks, depth=depth, id_map=ids))
    meshes = None
    if with_meshes:
        meshes = [
            extract_mesh(obj.shape, GT_MESH_RESOLUTION, bounds=((-1, -1, -1), (1, 1, 1)))
            for obj in scene.objects
        ]
    return (out, meshes) if with_meshes else out


def _numeric_normal(shape, p, h=1e-5):
    g = np.stack(
        [
            shape.query(p + np.eye(3)[a] * h) - shape.query(p - np.eye(3)[a] * h)
            for a in range(3)
        ],
        axis=-1,
    )
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(n, 1e-30)


def scene_hash(scene):
    """Stable content hash of all rendered bytes (catalog regression check)."""
    gt = render_ground_truth(scene)
    h = hashlib.sha256()
    for g in gt:
        h.update(np.ascontiguousarray(np.round(g.view.image * 255)).astype(np.uint8).tobytes())
        h.update(np.packbits(g.masks).tobytes())
    return h.hexdigest()


def standard_scenes(image_size=64):
    """Named deterministic catalog used across the test and acceptance suites."""
    scenes = {}

    # slight vertical offsets keep either ball from ever eclipsing the other
    scenes["two-spheres-apart"] = SyntheticScene(
        name="two-spheres-apart",
        objects=[
            SceneObject("ball_left", fld.Sphere((-0.3, 0.06, 0.0), 0.17), (0.85, 0.3, 0.25)),
            SceneObject("ball_right", fld.Sphere((0.3, -0.06, 0.0), 0.17), (0.25, 0.45, 0.85)),
        ],
        rings=[CameraRing(10, 18.0, 0.9), CameraRing(10, -18.0, 0.9, azimuth0_deg=18.0)],
        image_size=image_size,
    )

    scenes["sphere-occludes-sphere"] = SyntheticScene(
        name="sphere-occludes-sphere",
        objects=[
            SceneObject("front_ball", fld.Sphere((0.25, 0.0, 0.0), 0.2), (0.9, 0.55, 0.2)),
            SceneObject("back_ball", fld.Sphere((-0.22, 0.0, 0.0), 0.13), (0.3, 0.7, 0.4)),
        ],
        rings=[CameraRing(10, 15.0, 0.9), CameraRing(10, -15.0, 0.9, azimuth0_deg=18.0)],
        image_size=image_size,
    )

    scenes["cylinder-behind-box"] = SyntheticScene(
        name="cylinder-behind-box",
        objects=[
            SceneObject("panel", fld.Box((0.0, 0.0, 0.3), (0.24, 0.2, 0.05)), (0.75, 0.7, 0.3)),
            SceneObject("post", fld.Cylinder((0.0, 0.0, -0.18), 0.11, 0.22), (0.4, 0.35, 0.8)),
        ],
        rings=[CameraRing(10, 20.0, 0.9), CameraRing(10, -20.0, 0.9, azimuth0_deg=18.0)],
        image_size=image_size,
    )

    scenes["stack-in-contact"] = SyntheticScene(
        name="stack-in-contact",
        objects=[
            SceneObject("base_block", fld.Box((0.0, -0.11, 0.0), (0.24, 0.11, 0.24)), (0.8, 0.45, 0.3)),
            SceneObject("top_block", fld.Box((0.0, 0.12, 0.0), (0.16, 0.12, 0.16)), (0.35, 0.55, 0.8)),
        ],
        rings=[CameraRing(10, 22.0, 0.9), CameraRing(10, -22.0, 0.9, azimuth0_deg=18.0)],
        image_size=image_size,
    )

    # a covered tunnel whose core no camera can see into, probing losses on
    # never-observed space
    arch = fld.Union(
        [
            fld.Box((-0.17, 0.0, 0.0), (0.05, 0.15, 0.28)),
            fld.Box((0.17, 0.0, 0.0), (0.05, 0.15, 0.28)),
            fld.Box((0.0, 0.19, 0.0), (0.22, 0.04, 0.28)),
            fld.Box((0.0, -0.19, 0.0), (0.22, 0.04, 0.28)),
        ]
    )
    scenes["hidden-cavity"] = SyntheticScene(
        name="hidden-cavity",
        objects=[
            SceneObject("tunnel_block", arch, (0.75, 0.55, 0.25)),
            SceneObject("side_ball", fld.Sphere((0.42, -0.08, 0.0), 0.12), (0.3, 0.5, 0.85)),
        ],
        rings=[CameraRing(12, 50.0, 0.9), CameraRing(8, -50.0, 0.9, azimuth0_deg=15.0)],
        image_size=image_size,
    )
    return scenes


HIDDEN_CAVITY_CORE = {"center": (0.0, 0.0, 0.0), "half": (0.1, 0.12, 0.08)}
HIDDEN_CAVITY_FLOATER = {"center": (0.0, 0.0, 0.0), "radius": 0.07}


def save_scene_json(path, scene):
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=2, sort_keys=True)


def load_scene_json(path):
    with open(path) as fh:
        return SyntheticScene.from_dict(json.load(fh))
