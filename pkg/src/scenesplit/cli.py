"""Command-line pipeline: synth | reconstruct | propagate | separate | eval.

Exit codes: 0 ok, 2 input error, 3 external-service error, 4 numerical
failure. Every command is deterministic given its config and seed; the
effective configuration is echoed into the output directory as run.toml.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import scene_synth
from .evalkit import (
    evaluate_pair,
    extract_mesh,
    load_obj,
    mask_miou,
    save_obj,
    write_report_csv,
    write_report_json,
)
from .field import load_field, save_field
from .losses import TrainConfig
from .maskprop import (
    OracleSegmenter,
    PropagationConfig,
    SegmenterError,
    SegmenterPrompt,
    depth_order,
    label_points,
    merge_clouds,
    ObjectProposal,
    propagate_all,
)
from .sceneio import (
    SceneDirError,
    load_clicks,
    load_cloud,
    load_masks,
    load_views,
    save_cloud,
    save_masks,
    save_scene_dir,
)
from .segclient import RemoteSegmenter
from .separation import NumericalError, init_objects, train_objects, train_scene

log = logging.getLogger("scenesplit")

SEGMENTER_ENV = "SCENESPLIT_SEGMENTER_URL"

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SERVICE = 3
EXIT_NUMERIC = 4


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    allowed = {"train", "propagation"}
    unknown = set(data) - allowed
    if unknown:
        raise SceneDirError(f"unknown config sections: {sorted(unknown)}")
    return data


def _build_config(cls, section, overrides):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise SceneDirError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _echo_config(out_dir, train_cfg=None, prop_cfg=None, extra=None):
    lines = []
    if extra:
        for key, value in sorted(extra.items()):
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    for name, cfg in (("train", train_cfg), ("propagation", prop_cfg)):
        if cfg is None:
            continue
        lines.append(f"[{name}]")
        for f in dataclasses.fields(cfg):
            lines.append(f"{f.name} = {_toml_value(getattr(cfg, f.name))}")
        lines.append("")
    Path(out_dir, "run.toml").write_text("\n".join(lines))


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if value is None:
        return '"none"'
    return json.dumps(str(value))


def _make_segmenter(spec, scene_dir, views, noise_px=0.0, seed=0):
    url = os.environ.get(SEGMENTER_ENV) or (spec if spec and spec != "oracle" else None)
    if url:
        seg = RemoteSegmenter(url)
        seg.health()  # unreachable service fails fast (exit 3)
        return seg
    scene_json = Path(scene_dir) / "scene.json"
    if not scene_json.exists():
        raise SceneDirError(
            "oracle segmenter needs scene.json (synthetic scenes); pass a segmenter URL"
        )
    scene = scene_synth.load_scene_json(scene_json)
    return OracleSegmenter(scene, views=views, noise_px=noise_px, seed=seed)


# -- commands --------------------------------------------------------------------


def cmd_synth(args):
    scenes = scene_synth.standard_scenes(image_size=args.size)
    names = list(scenes) if args.scene == "all" else [args.scene]
    for name in names:
        if name not in scenes:
            raise SceneDirError(f"unknown scene {name!r}; catalog: {sorted(scenes)}")
        scene = scenes[name]
        out = Path(args.out) / name if args.scene == "all" else Path(args.out)
        gt, meshes = scene_synth.render_ground_truth(scene, with_meshes=True)
        save_scene_dir(out, scene, gt, meshes)
        log.info("wrote %s (%d views)", out, len(gt))
    return EXIT_OK


def cmd_reconstruct(args):
    views = load_views(args.scene_dir)
    cfg = _build_config(
        TrainConfig,
        _load_config_file(args.config).get("train", {}),
        {"iters_scene": args.iters, "seed": args.seed, "scene_resolution": args.resolution},
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, train_cfg=cfg, extra={"command": "reconstruct", "scene_dir": str(args.scene_dir)})
    train_scene(views, cfg, run_dir=out)
    log.info("scene checkpoint written to %s", out)
    return EXIT_OK


def _anchor_masks_from_clicks(clicks, views, segmenter, fld):
    by_id = {v.view_id: v for v in views}
    vid = clicks["view_id"]
    if vid not in by_id:
        raise SceneDirError(f"clicks reference unknown view {vid}")
    view = by_id[vid]
    proposals = []
    for obj in clicks["objects"]:
        seeds = [(int(r), int(c), True) for r, c in obj["seeds"]]
        if not seeds:
            proposals.append(
                ObjectProposal(
                    np.zeros((view.height, view.width), dtype=bool),
                    np.empty((0, 2), dtype=np.int64),
                )
            )
            continue
        result = segmenter.segment(SegmenterPrompt(vid, seeds), image=view.image)
        proposals.append(
            ObjectProposal(np.asarray(result.mask, dtype=bool), np.asarray([s[:2] for s in seeds]))
        )
    masks = depth_order(proposals, fld, view)
    return {vid: masks}


def cmd_propagate(args):
    scene_dir = Path(args.scene_dir)
    run_dir = Path(args.run)
    views = load_views(scene_dir)
    sdf_path = run_dir / "scene.field"
    if not sdf_path.exists():
        raise SceneDirError(f"missing scene checkpoint: {sdf_path}")
    fld = load_field(sdf_path)
    cfg = _build_config(
        PropagationConfig,
        _load_config_file(args.config).get("propagation", {}),
        {"iterations": args.iterations},
    )
    segmenter = _make_segmenter(args.segmenter, scene_dir, views, args.noise_px, args.seed)
    if args.anchors:
        anchors = load_masks(args.anchors, [v.view_id for v in views])
    else:
        clicks = load_clicks(args.clicks or scene_dir / "clicks.json")
        anchors = _anchor_masks_from_clicks(clicks, views, segmenter, fld)
    result = propagate_all(fld, views, anchors, segmenter, cfg)
    if len(result.errors) and len(result.errors) >= (len(views) - len(anchors)) * cfg.iterations:
        raise SegmenterError("segmenter failed on every view")
    for vid, masks in result.masks.items():
        save_masks(run_dir / "masks", vid, masks)
    save_cloud(run_dir / "cloud.npz", result.cloud)
    _echo_config(run_dir, prop_cfg=cfg, extra={"command": "propagate", "segmenter": args.segmenter})
    gt_dir = scene_dir / "gt_masks"
    if gt_dir.is_dir():
        gt = load_masks(gt_dir, [v.view_id for v in views])
        rows = []
        for it, snap in enumerate(result.snapshots):
            vids = [vid for vid in sorted(snap) if vid not in anchors and vid in gt]
            miou = mask_miou([snap[vid] for vid in vids], [gt[vid] for vid in vids])
            rows.append((it + 1, miou))
        with open(run_dir / "miou.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "miou"])
            w.writerows(rows)
        log.info("mIoU per iteration: %s", rows)
    return EXIT_OK


def cmd_separate(args):
    scene_dir = Path(args.scene_dir)
    run_dir = Path(args.run)
    views = load_views(scene_dir)
    for name in ("scene.field", "scene_color.field"):
        if not (run_dir / name).exists():
            raise SceneDirError(f"missing scene checkpoint: {run_dir / name}")
    sdf = load_field(run_dir / "scene.field")
    color = load_field(run_dir / "scene_color.field")
    state = json.loads((run_dir / "state.json").read_text()) if (run_dir / "state.json").exists() else {}
    mask_root = Path(args.masks) if args.masks else run_dir / "masks"
    if not mask_root.is_dir() and (scene_dir / "gt_masks").is_dir():
        mask_root = scene_dir / "gt_masks"
    if not mask_root.is_dir():
        raise SceneDirError(f"missing masks directory: {mask_root}")
    masksets = load_masks(mask_root, [v.view_id for v in views])
    cfg = _build_config(
        TrainConfig,
        _load_config_file(args.config).get("train", {}),
        {
            "iters_objects": args.iters,
            "seed": args.seed,
            "loss_mode": args.loss_mode,
            "sharpness_init": state.get("sharpness"),
        },
    )
    cloud_path = run_dir / "cloud.npz"
    if cloud_path.exists():
        cloud = load_cloud(cloud_path)
    else:
        cloud = merge_clouds(
            [label_points(sdf, v, masksets[v.view_id]) for v in views if v.view_id in masksets]
        )
    _echo_config(run_dir, train_cfg=cfg, extra={"command": "separate", "init": args.init})
    fs, run, _ = train_objects(
        views, masksets, cloud, sdf, color, cfg, run_dir=run_dir, init_mode=args.init
    )
    for k in range(fs.k):
        mesh = extract_mesh(fs.sdfs[k])
        save_obj(run_dir / f"object_{k}.obj", mesh)
    log.info("wrote %d object checkpoints and meshes to %s", fs.k, run_dir)
    return EXIT_OK


def cmd_eval(args):
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt) / "gt_meshes" if (Path(args.gt) / "gt_meshes").is_dir() else Path(args.gt)
    pred_meshes = sorted(pred_dir.glob("object_*.obj"))
    gt_meshes = sorted(gt_dir.glob("object_*.obj"))
    if not pred_meshes or len(pred_meshes) != len(gt_meshes):
        raise SceneDirError(
            f"mesh pairs do not match: {len(pred_meshes)} predicted vs {len(gt_meshes)} ground truth"
        )
    reports = {}
    agg = []
    for pm, gm in zip(pred_meshes, gt_meshes):
        if pm.name != gm.name:
            raise SceneDirError(f"mesh pair mismatch: {pm.name} vs {gm.name}")
        rep = evaluate_pair(load_obj(pm), load_obj(gm), tau=args.tau, seed=args.seed)
        reports[pm.stem] = rep
        agg.append(rep)
        log.info(
            "%s: chamfer %.4f precision %.3f completion %.3f",
            pm.stem, rep.chamfer, rep.precision_ratio, rep.completion_ratio,
        )
    out_dir = Path(args.out) if args.out else pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(out_dir / "metrics.json", reports)
    write_report_csv(out_dir / "metrics.csv", reports)
    mean = {
        "chamfer": float(np.mean([r.chamfer for r in agg])),
        "precision_ratio": float(np.mean([r.precision_ratio for r in agg])),
        "completion_ratio": float(np.mean([r.completion_ratio for r in agg])),
    }
    print(json.dumps(mean, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="scenesplit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--scene", default="all", help="catalog name or 'all'")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("reconstruct", help="stage 1: full-scene field")
    s.add_argument("scene_dir")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--iters", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("propagate", help="stage 2: masks for all views")
    s.add_argument("scene_dir")
    s.add_argument("--run", required=True)
    s.add_argument("--segmenter", default="oracle", help="'oracle' or a service URL")
    s.add_argument("--clicks", help="clicks JSON (default: scene_dir/clicks.json)")
    s.add_argument("--anchors", help="directory of existing anchor masks")
    s.add_argument("--iterations", type=int)
    s.add_argument("--noise-px", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_propagate)

    s = sub.add_parser("separate", help="stage 3: K object fields")
    s.add_argument("scene_dir")
    s.add_argument("--run", required=True)
    s.add_argument("--masks", help="mask directory (default: run masks, then gt_masks)")
    s.add_argument("--loss-mode", choices=["naive", "occlusion-aware", "compactness"])
    s.add_argument("--init", default="scene-copy", choices=["scene-copy", "sphere"])
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_separate)

    s = sub.add_parser("eval", help="metrics between predicted and gt meshes")
    s.add_argument("--pred", required=True, help="directory with object_<k>.obj")
    s.add_argument("--gt", required=True, help="scene dir (gt_meshes/) or mesh dir")
    s.add_argument("--tau", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except SceneDirError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except SegmenterError as exc:
        log.error("%s", exc)
        return EXIT_SERVICE
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
