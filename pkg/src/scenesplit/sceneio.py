"""Scene-directory layout shared by the generator and the pipeline commands.

    scene_dir/
      cameras.json          [{view_id, width, height, fx, fy, cx, cy,
                              world_to_camera: [16 numbers, row-major]}]
      images/<view_id>.png
      gt_masks/<view_id>/<k>.png     (synthetic scenes; 0/255)
      gt_depth/<view_id>.npy
      gt_meshes/object_<k>.obj
      scene.json            analytic scene description (oracle segmenter)
      clicks.json           example anchor clicks for the first view

Run directories hold checkpoints (scene.field, object_<k>.field), loss logs,
propagated masks under masks/<view_id>/<k>.png, and metric reports.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import CameraView
from .maskprop import coreset_select
from .segclient import decode_image_png, decode_mask_png, encode_image_png, encode_mask_png


class SceneDirError(RuntimeError):
    """The scene directory is missing a required file (CLI exit code 2)."""


def _require(path, what):
    if not Path(path).exists():
        raise SceneDirError(f"missing {what}: {path}")
    return Path(path)


def save_cameras(path, views):
    payload = [
        {
            "view_id": v.view_id,
            "width": v.width,
            "height": v.height,
            "fx": v.fx,
            "fy": v.fy,
            "cx": v.cx,
            "cy": v.cy,
            "world_to_camera": np.asarray(v.world_to_camera).reshape(-1).tolist(),
        }
        for v in views
    ]
    Path(path).write_text(json.dumps(payload, indent=2))


def load_cameras(path):
    data = json.loads(_require(path, "cameras.json").read_text())
    return [
        CameraView(
            view_id=d["view_id"],
            width=d["width"],
            height=d["height"],
            fx=d["fx"],
            fy=d["fy"],
            cx=d["cx"],
            cy=d["cy"],
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
        )
        for d in data
    ]


def load_views(scene_dir):
    """Cameras plus images; raises SceneDirError on anything missing."""
    scene_dir = Path(scene_dir)
    views = load_cameras(_require(scene_dir / "cameras.json", "cameras.json"))
    for v in views:
        img = _require(scene_dir / "images" / f"{v.view_id}.png", f"image for {v.view_id}")
        v.image = decode_image_png(img.read_bytes())
        if v.image.shape != (v.height, v.width, 3):
            raise SceneDirError(f"{img}: image shape {v.image.shape} mismatches camera entry")
    return views


def save_masks(mask_root, view_id, masks):
    d = Path(mask_root) / view_id
    d.mkdir(parents=True, exist_ok=True)
    for k in range(masks.shape[0]):
        (d / f"{k}.png").write_bytes(encode_mask_png(masks[k]))


def load_masks(mask_root, view_ids, k=None):
    """masks/<view_id>/<k>.png -> dict view_id -> (K, H, W) bool."""
    mask_root = Path(mask_root)
    out = {}
    for vid in view_ids:
        d = mask_root / vid
        if not d.is_dir():
            continue
        files = sorted(d.glob("*.png"), key=lambda p: int(p.stem))
        if k is not None:
            files = files[:k]
        if not files:
            continue
        out[vid] = np.stack([decode_mask_png(f.read_bytes()) for f in files])
    if not out:
        raise SceneDirError(f"no mask files under {mask_root}")
    return out


def save_scene_dir(scene_dir, scene, gt_views, meshes=None):
    """Write the full synthetic scene directory, clicks file included."""
    from .evalkit import save_obj
    from .scene_synth import save_scene_json

    scene_dir = Path(scene_dir)
    (scene_dir / "images").mkdir(parents=True, exist_ok=True)
    (scene_dir / "gt_depth").mkdir(exist_ok=True)
    views = [g.view for g in gt_views]
    save_cameras(scene_dir / "cameras.json", views)
    save_scene_json(scene_dir / "scene.json", scene)
    for g in gt_views:
        (scene_dir / "images" / f"{g.view.view_id}.png").write_bytes(
            encode_image_png(g.view.image)
        )
        save_masks(scene_dir / "gt_masks", g.view.view_id, g.masks)
        np.save(scene_dir / "gt_depth" / f"{g.view.view_id}.npy", g.depth)
    if meshes is not None:
        (scene_dir / "gt_meshes").mkdir(exist_ok=True)
        for k, mesh in enumerate(meshes):
            save_obj(scene_dir / "gt_meshes" / f"object_{k}.obj", mesh)
    write_clicks(scene_dir / "clicks.json", gt_views)


def write_clicks(path, gt_views, seeds_per_object=3):
    """Example anchor clicks: the view where every object is largest."""
    best = max(gt_views, key=lambda g: min(m.sum() for m in g.masks) if g.masks.size else 0)
    objects = []
    for k in range(best.masks.shape[0]):
        px = np.argwhere(best.masks[k])
        if px.shape[0] == 0:
            objects.append({"seeds": []})
            continue
        idx = coreset_select(px.astype(np.float64), seeds_per_object)
        objects.append({"seeds": [[int(r), int(c)] for r, c in px[idx]]})
    payload = {"view_id": best.view.view_id, "objects": objects}
    Path(path).write_text(json.dumps(payload, indent=2))


def load_clicks(path):
    data = json.loads(_require(path, "clicks file").read_text())
    if "view_id" not in data or "objects" not in data:
        raise SceneDirError(f"{path}: clicks file needs view_id and objects")
    return data


def save_cloud(path, cloud):
    np.savez_compressed(
        path,
        points=cloud.points,
        labels=cloud.labels,
        depths=cloud.depths,
        source_views=np.asarray(cloud.source_views, dtype="U32"),
    )


def load_cloud(path):
    from .maskprop import LabeledPointCloud

    data = np.load(_require(path, "labeled point cloud"))
    return LabeledPointCloud(
        points=data["points"],
        labels=data["labels"].astype(np.int64),
        source_views=data["source_views"].astype(object),
        depths=data["depths"],
    )
