"""Command-line pipeline: synth | fuse | check | train | render | eval | ablate.

Config precedence is defaults < JSON config file < explicit flags, and the
effective configuration is printed at startup so every run is reproducible
from its log.  A machine-readable manifest (no timestamps, outputs are
byte-stable across reruns) is written next to every command's outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .consistency import (
    DepthStream,
    build_masks,
    dynamic_consistency,
    fuse_point_cloud,
)
from .field import load_checkpoint
from .fileio import write_mask_png, write_pfm, write_ply, write_png
from .raster import RenderConfig, render_field
from .scenes import (
    SceneSpec,
    calibration_spec,
    generate_scene,
    load_dataset,
    plane_spec,
    reference_spec,
    save_dataset,
)
from .trainer import (
    ABLATION_ROWS,
    LossWeights,
    TrainConfig,
    TrainData,
    ablate,
    evaluate,
    train,
)
from . import figures

_PRESETS = {
    "reference": reference_spec,
    "plane": plane_spec,
    "calibration": calibration_spec,
}


# ---------------------------------------------------------------------------
# config plumbing


def _effective_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < JSON file < explicit flags; unknown JSON keys are errors."""
    eff = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise SystemExit(
                f"config keys not valid for this command: {sorted(unknown)}"
            )
        eff.update(loaded)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            eff[key] = val
    return eff


def _announce(command: str, eff: dict) -> None:
    print(f"splat4d {command} effective config: "
          f"{json.dumps(eff, sort_keys=True, default=str)}")


def _write_manifest(out_dir: str, command: str, eff: dict,
                    outputs: list[str]) -> str:
    path = os.path.join(out_dir, f"manifest_{command}.json")
    payload = {
        "command": command,
        # thread count changes wall time only, never bytes, so it stays out
        "config": {k: eff[k] for k in sorted(eff) if k != "threads"},
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
        "version": __version__,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path


def _load(data_dir: str):
    if not os.path.isdir(data_dir):
        raise SystemExit(f"dataset directory not found: {data_dir}")
    return load_dataset(data_dir)


def _train_config(eff: dict) -> TrainConfig:
    weights = LossWeights(eff["lambda_rank"], eff["lambda_patch"],
                          eff["lambda_struct"])
    return TrainConfig(
        iterations=eff["iterations"],
        seed=eff["seed"],
        weights=weights,
        use_fusion_init=not eff["no_fusion_init"],
        use_consistency=not eff["no_consistency"],
        init_voxel=eff["init_voxel"],
        prune_every=eff["prune_every"],
        checkpoint_every=eff["checkpoint_every"],
        threads=eff["threads"],
    )


_TRAIN_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "iterations": 2000,
    "lambda_rank": 0.05,
    "lambda_patch": 0.02,
    "lambda_struct": 0.02,
    "no_fusion_init": False,
    "no_consistency": False,
    "init_voxel": 0.1,
    "prune_every": 100,
    "checkpoint_every": 0,
}


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> int:
    defaults = {
        "seed": 0, "threads": 1, "preset": "reference", "views": None,
        "frames": None, "width": None, "height": None,
    }
    eff = _effective_config(defaults, args)
    _announce("synth", eff)
    overrides = {}
    for key, field in (("views", "num_views"), ("frames", "num_frames"),
                       ("width", "width"), ("height", "height")):
        if eff[key] is not None:
            overrides[field] = eff[key]
    try:
        spec = _PRESETS[eff["preset"]](seed=eff["seed"], **overrides)
        scene = generate_scene(spec)
    except ValueError as exc:
        raise SystemExit(f"invalid scene spec: {exc}")
    os.makedirs(args.out, exist_ok=True)
    save_dataset(args.out, scene)
    outputs = [os.path.join(args.out, p) for p in sorted(os.listdir(args.out))]
    _write_manifest(args.out, "synth", eff, outputs)
    print(f"wrote dataset ({scene.spec.num_frames} frames x "
          f"{scene.spec.num_views} views) to {args.out}")
    return 0


def _fuse_inputs(dataset, eff):
    """Masks + the per-frame arrays check and fuse share."""
    rig = dataset.training_rig()
    b = dataset.training_bundle()
    stream = DepthStream(depth=b.depth_mvs, prob=b.prob, kind="mvs-metric")
    scores = dynamic_consistency(stream, rig, threads=eff["threads"])
    result = build_masks(scores, stream,
                         score_threshold=eff["score_threshold"])
    return rig, b, scores, result.masks


def _cmd_fuse(args) -> int:
    defaults = {"seed": 0, "threads": 1, "score_threshold": 1.8,
                "frame": 0, "cap": 200_000, "voxel": 0.02}
    eff = _effective_config(defaults, args)
    _announce("fuse", eff)
    dataset = _load(args.data)
    rig, b, _, masks = _fuse_inputs(dataset, eff)
    t = eff["frame"]
    points, colors = fuse_point_cloud(
        b.depth_mvs[t], b.rgb[t], masks[t], rig, frame=t,
        cap=eff["cap"], voxel_size=eff["voxel"], seed=eff["seed"],
    )
    os.makedirs(args.out, exist_ok=True)
    ply = os.path.join(args.out, f"fused_t{t:04d}.ply")
    write_ply(ply, points, colors)
    _write_manifest(args.out, "fuse", eff, [ply])
    print(f"fused {points.shape[0]} points -> {ply}")
    return 0


def _cmd_check(args) -> int:
    defaults = {"seed": 0, "threads": 1, "score_threshold": 1.8,
                "strict": False}
    eff = _effective_config(defaults, args)
    _announce("check", eff)
    dataset = _load(args.data)
    rig, b, scores, masks = _fuse_inputs(dataset, eff)
    os.makedirs(args.out, exist_ok=True)

    outputs = []
    for n in range(rig.num_views):
        p = os.path.join(args.out, f"score_v{n:02d}.pfm")
        write_pfm(p, scores[n].astype(np.float32))
        outputs.append(p)
    for t in range(rig.num_frames):
        for n in range(rig.num_views):
            p = os.path.join(args.out, f"mask_t{t:04d}_v{n:02d}.png")
            write_mask_png(p, masks[t, n])
            outputs.append(p)

    kept = masks.mean(axis=(0, 2, 3))
    report = {
        "score_threshold": eff["score_threshold"],
        "kept_fraction_per_view": [float(k) for k in kept],
        "kept_fraction_overall": float(masks.mean()),
    }
    report_path = os.path.join(args.out, "coverage.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs.append(report_path)

    empty = not masks.any()
    if empty:
        print("warning: consistency masks are empty at this threshold",
              file=sys.stderr)
    else:
        points, colors = fuse_point_cloud(
            b.depth_mvs[0], b.rgb[0], masks[0], rig, frame=0, seed=eff["seed"])
        ply = os.path.join(args.out, "fused_t0000.ply")
        write_ply(ply, points, colors)
        outputs.append(ply)

    fig = figures.mask_coverage(scores, masks,
                                os.path.join(args.out, "coverage.png"))
    outputs.append(fig)
    _write_manifest(args.out, "check", eff, outputs)
    print("kept fraction per view: "
          + ", ".join(f"{k:.3f}" for k in kept))
    return 1 if (empty and eff["strict"]) else 0


def _cmd_train(args) -> int:
    eff = _effective_config(_TRAIN_DEFAULTS, args)
    _announce("train", eff)
    dataset = _load(args.data)
    config = _train_config(eff)
    data = TrainData.from_scene(dataset, config)
    result = train(data, config, out_dir=args.out)
    outputs = [result.checkpoint_path, result.metrics_path,
               result.checkpoint_path.rsplit(".", 1)[0] + ".json"]
    if result.history:
        fig = figures.training_curves(
            result.history, os.path.join(args.out, "curves.png"))
        outputs.append(fig)
    _write_manifest(args.out, "train", eff, [p for p in outputs if p])
    last = result.history[-1] if result.history else None
    tail = (f", final psnr {last['psnr']:.2f}" if last else "")
    print(f"trained {config.iterations} iterations, "
          f"{result.field.num} gaussians{tail}")
    return 0


def _cmd_render(args) -> int:
    defaults = {"seed": 0, "threads": 1, "frame": 0, "view": 0,
                "depth": False}
    eff = _effective_config(defaults, args)
    _announce("render", eff)
    dataset = _load(args.data)
    field = load_checkpoint(args.checkpoint)
    rig = dataset.rig
    t, n = eff["frame"], eff["view"]
    if not (0 <= t < rig.num_frames and 0 <= n < rig.num_views):
        raise SystemExit(f"frame {t} / view {n} outside rig "
                         f"({rig.num_frames} frames, {rig.num_views} views)")
    cam = rig.view(t, n)
    rcfg = RenderConfig(threads=eff["threads"],
                        background=tuple(dataset.spec.background))
    out = render_field(field, rig.frame_time(t), cam, rcfg)
    os.makedirs(args.out, exist_ok=True)
    png = os.path.join(args.out, f"render_t{t:04d}_v{n:02d}.png")
    write_png(png, out.color)
    outputs = [png]
    if eff["depth"]:
        with np.errstate(invalid="ignore"):
            depth = np.where(out.alpha > 1e-6, out.depth / out.alpha, 0.0)
        pfm = os.path.join(args.out, f"depth_t{t:04d}_v{n:02d}.pfm")
        write_pfm(pfm, depth.astype(np.float32))
        outputs.append(pfm)
    _write_manifest(args.out, "render", eff, outputs)
    print(f"rendered frame {t} view {n} -> {png}")
    return 0


def _print_table(rows: list[dict], columns: list[str]) -> None:
    head = " ".join(f"{c:>12}" for c in columns)
    print(head)
    for row in rows:
        cells = []
        for c in columns:
            v = row[c]
            cells.append(f"{v:>12.4f}" if isinstance(v, float) else f"{v:>12}")
        print(" ".join(cells))


def _cmd_eval(args) -> int:
    defaults = {"seed": 0, "threads": 1, "views": None}
    eff = _effective_config(defaults, args)
    _announce("eval", eff)
    dataset = _load(args.data)
    field = load_checkpoint(args.checkpoint)
    if eff["views"] is None:
        views = list(dataset.spec.holdout_views) or list(
            range(dataset.spec.num_views))
    else:
        views = [int(v) for v in str(eff["views"]).split(",")]
    rcfg = RenderConfig(threads=eff["threads"],
                        background=tuple(dataset.spec.background))
    rows = evaluate(field, dataset.rig, dataset.bundle.rgb, views=views,
                    config=rcfg)
    _print_table(rows, ["view", "psnr", "ssim", "avge2"])
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "eval.csv")
    with open(csv_path, "w") as f:
        f.write("view,psnr,ssim,avge2\n")
        for r in rows:
            f.write(f"{r['view']},{r['psnr']:.6f},{r['ssim']:.6f},"
                    f"{r['avge2']:.6f}\n")
    fig = figures.eval_chart(rows, os.path.join(args.out, "metrics.png"))
    _write_manifest(args.out, "eval", eff, [csv_path, fig])
    return 0


def _cmd_ablate(args) -> int:
    defaults = dict(_TRAIN_DEFAULTS, preset="reference", workers=None)
    eff = _effective_config(defaults, args)
    _announce("ablate", eff)
    spec = _PRESETS[eff["preset"]](seed=eff["seed"])
    scene = generate_scene(spec)
    config = _train_config(eff)
    rows = ablate(scene, config, workers=eff["workers"])
    _print_table(rows, ["name", "psnr", "ssim", "avge2", "num_gaussians", "seconds"])
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablation.csv")
    with open(csv_path, "w") as f:
        f.write("name,psnr,ssim,avge2,num_gaussians\n")
        for r in rows:
            f.write(f"{r['name']},{r['psnr']:.6f},{r['ssim']:.6f},"
                    f"{r['avge2']:.6f},{r['num_gaussians']}\n")
    fig = figures.ablation_chart(rows, os.path.join(args.out, "ablation.png"))
    _write_manifest(args.out, "ablate", eff, [csv_path, fig])
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(sub: argparse.ArgumentParser, *, out_required: bool = True):
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", required=out_required,
                     help="output directory")
    sub.add_argument("--config", default=None,
                     help="JSON file overriding command defaults")
    sub.add_argument("--threads", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splat4d",
        description="4D gaussian splatting with multi-view depth filtering",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--preset", choices=sorted(_PRESETS), default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fuse", help="fuse masked depth into a point cloud")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--score-threshold", dest="score_threshold", type=float,
                   default=None)
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--voxel", type=float, default=None)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("check", help="consistency scores, masks, coverage")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--score-threshold", dest="score_threshold", type=float,
                   default=None)
    p.add_argument("--strict", action="store_true", default=None,
                   help="exit nonzero when the masks come out empty")
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("train", help="optimize a gaussian field")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", dest="iterations", type=int, default=None)
    p.add_argument("--lambda-rank", dest="lambda_rank", type=float,
                   default=None)
    p.add_argument("--lambda-patch", dest="lambda_patch", type=float,
                   default=None)
    p.add_argument("--lambda-struct", dest="lambda_struct", type=float,
                   default=None)
    p.add_argument("--no-fusion-init", dest="no_fusion_init",
                   action="store_true", default=None)
    p.add_argument("--no-consistency", dest="no_consistency",
                   action="store_true", default=None)
    p.add_argument("--init-voxel", dest="init_voxel", type=float,
                   default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                   default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render one frame/view of a checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--view", type=int, default=None)
    p.add_argument("--depth", action="store_true", default=None,
                   help="also write the depth map as PFM")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--views", default=None,
                   help="comma-separated view indices (default: holdout)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and score every supervision row")
    _common(p)
    p.add_argument("--preset", choices=sorted(_PRESETS), default=None)
    p.add_argument("--iters", dest="iterations", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
