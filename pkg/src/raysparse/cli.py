"""Command-line entry point.

Every command writes into a run directory (``--run-dir``, default
``runs/<command>``) holding ``manifest.json`` with the resolved config, its
hash, the arguments and the files produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import PRESETS, Config, load_config
from .geometry import build_interaction_index, center_volume, memory_report
from .io import load_views, save_index
from .metrics import Thresholds, threshold_sweep, write_report, write_sweep_csv
from .shapes import merge_meshes, object_mesh, write_obj
from .sparse_attention import PIXELS_TO_VOXELS, SparseMask, SparseMultiheadAttention
from .synthetic import frame_subset, generate_trajectory, read_dataset, read_scene, write_dataset

log = logging.getLogger("raysparse")


def _resolve_config(args) -> Config:
    config = load_config(args.config, args.preset)
    if args.seed is not None:
        config = config.replace(train={"seed": args.seed})
    return config


class Run:
    def __init__(self, args, config: Config):
        self.dir = Path(args.run_dir or Path("runs") / args.command)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.outputs: list[str] = []
        self.arguments = {
            k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"
        }

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def finish(self, extra: dict | None = None) -> None:
        manifest = {
            "command": self.arguments["command"],
            "arguments": self.arguments,
            "config_hash": self.config.hash(),
            "config": self.config.to_dict(),
            "outputs": sorted(set(self.outputs)),
            **(extra or {}),
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _load_samples(data_dir, seed: int, n: int, config: Config):
    if data_dir:
        return read_dataset(data_dir)
    from .train import generate_samples

    return generate_samples(seed, n, config)


def _frames(n_pool: int, n_frames: int) -> list[int]:
    return frame_subset(n_pool, n_pool if n_frames <= 0 else min(n_frames, n_pool))


# --- commands ------------------------------------------------------------------


def cmd_gen_scenes(args, config: Config, run: Run) -> dict:
    from .train import split_seeds

    train_seed, eval_seed = split_seeds(config.train.seed)
    seed = train_seed if args.split == "train" else eval_seed
    n = args.n if args.n is not None else (
        config.train.n_train_scenes if args.split == "train" else config.train.n_eval_scenes
    )
    out = run.path(args.split)
    write_dataset(out, seed, n, config.scenes, config.hash())
    return {"scenes": n, "dataset": str(out)}


def cmd_build_index(args, config: Config, run: Run) -> dict:
    b = config.backbone
    views = load_views(Path(args.scene) / "cameras.json")
    views = [views[i] for i in _frames(len(views), args.frames)]
    views = [v.with_feature_grid(b.feature_width, b.feature_height) for v in views]
    grid = center_volume(views, b.grid_extent, b.grid_dims)
    index = build_interaction_index(views, grid, b.t_near, b.t_far)
    save_index(run.path("index.rtix"), index)
    counts = index.pairs_per_pixel()
    stats = {
        "n_views": len(views),
        "n_pairs": len(index),
        "max_pairs_per_pixel": int(counts.max()) if counts.size else 0,
        "mean_pairs_per_pixel": float(counts.mean()) if counts.size else 0.0,
        "grid_origin": grid.origin.tolist(),
        "voxel_size": grid.voxel_size.tolist(),
    }
    run.path("index_stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    return stats


def bench_memory(config: Config, seed: int, n_views: int, timing: bool = True, repeats: int = 3) -> dict:
    """Index size and dense/sparse attention storage for one synthetic trajectory."""
    b = config.backbone
    views = generate_trajectory(seed, config.scenes, n_views)
    views = [v.with_feature_grid(b.feature_width, b.feature_height) for v in views]
    grid = center_volume(views, b.grid_extent, b.grid_dims)
    index = build_interaction_index(views, grid, b.t_near, b.t_far)
    report = memory_report(index, n_heads=b.n_heads, bytes_per_scalar=4)
    result = {"entries": report.n_pairs, "n_views": n_views, **report.to_dict(), "fwd_ms": None, "bwd_ms": None}
    if timing:
        gen = torch.Generator().manual_seed(seed)
        attn = SparseMultiheadAttention(b.d_model, b.n_heads, zero_init_output=False)
        mask = SparseMask.from_index(index, PIXELS_TO_VOXELS)
        target = torch.randn(index.n_voxels_total, b.d_model, generator=gen)
        source = torch.randn(index.n_pixels_total, b.d_model, generator=gen, requires_grad=True)
        fwd, bwd = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = attn(target, source, mask)
            t1 = time.perf_counter()
            out.sum().backward()
            t2 = time.perf_counter()
            fwd.append(t1 - t0)
            bwd.append(t2 - t1)
        result["fwd_ms"] = 1000 * float(np.median(fwd))
        result["bwd_ms"] = 1000 * float(np.median(bwd))
    return result


def cmd_bench_memory(args, config: Config, run: Run) -> dict:
    n_views = args.views or config.train.train_frames
    result = bench_memory(config, config.train.seed, n_views, timing=not args.no_timing)
    run.path("memory.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def cmd_train(args, config: Config, run: Run) -> dict:
    from .train import Trainer, evaluate, generate_samples, split_seeds

    if args.steps is not None:
        p1 = min(args.steps, config.train.phase1_steps)
        config = config.replace(train={"phase1_steps": p1, "phase2_steps": args.steps - p1})
        run.config = config
    t = config.train
    train_seed, eval_seed = split_seeds(t.seed)
    train = read_dataset(args.data) if args.data else generate_samples(train_seed, t.n_train_scenes, config)
    held_out = read_dataset(args.eval_data) if args.eval_data else generate_samples(eval_seed, t.n_eval_scenes, config)
    trainer = Trainer(config, train, held_out, run.dir)
    if args.resume:
        trainer.resume(args.resume)
    log_path = run.path("train_log.jsonl")
    if not args.resume:
        log_path.write_text("")
    trainer.run(log_file=log_path)
    trainer.save(run.path("checkpoint.rtck"))
    report = evaluate(trainer.model, held_out, t.eval_frames)
    write_report(run.path("eval_report.json"), report.to_dict())
    return report.summary()


def cmd_eval(args, config: Config, run: Run) -> dict:
    from .train import evaluate, generate_samples, model_from_checkpoint, split_seeds

    model, ckpt = model_from_checkpoint(args.checkpoint)
    run.config = ckpt.config
    t = ckpt.config.train
    samples = _load_samples(args.data, split_seeds(t.seed)[1], t.n_eval_scenes, ckpt.config)
    thresholds = Thresholds(scale_mode=args.scale_mode)
    summaries = {}
    for n in args.frames or [t.eval_frames]:
        report = evaluate(model, samples, n, thresholds)
        write_report(run.path(f"eval_{n}frames.json"), report.to_dict())
        summaries[str(n)] = report.summary()
    return summaries


def _scene_inputs(scene_dir, n_frames):
    sample = read_scene(scene_dir)
    frames = _frames(sample.n_frames, n_frames)
    return sample, frames, torch.from_numpy(sample.float_images(frames)), [sample.views[i] for i in frames]


def cmd_extract_mesh(args, config: Config, run: Run) -> dict:
    from .train import infer, model_from_checkpoint

    model, ckpt = model_from_checkpoint(args.checkpoint)
    run.config = ckpt.config
    _, _, images, views = _scene_inputs(args.scene, args.frames)
    preds, _, _ = infer(model, images, views)
    meshes, records = [], []
    for i, pred in enumerate(preds):
        mesh = object_mesh(pred, args.iso)
        write_obj(run.path(f"object_{i:02d}.obj"), mesh)
        meshes.append(mesh)
        records.append({
            "category": pred.category, "score": pred.score, "center": pred.center.tolist(),
            "scale": pred.scale.tolist(), "yaw": pred.yaw, "n_triangles": len(mesh),
        })
    write_obj(run.path("scene.obj"), merge_meshes(meshes))
    run.path("predictions.json").write_text(json.dumps(records, indent=1, sort_keys=True))
    return {"n_objects": len(preds)}


def cmd_render_nvs(args, config: Config, run: Run) -> dict:
    from .train import model_from_checkpoint

    model, ckpt = model_from_checkpoint(args.checkpoint)
    run.config = ckpt.config
    if model.nvs is None:
        raise SystemExit("checkpoint was trained without the novel-view head (heads.nvs = false)")
    sample, frames, images, views = _scene_inputs(args.scene, args.frames)
    b = ckpt.config.backbone
    with torch.no_grad():
        geometry = model.geometry(views)
        voxels = model.backbone(images, geometry).voxels
        rendered = model.nvs(voxels, sample.views[args.view], geometry.grid, (b.feature_height, b.feature_width),
                             t_near=b.t_near, t_far=b.t_far).numpy()
    Image.fromarray(np.round(rendered * 255).astype(np.uint8)).save(run.path(f"novel_{args.view:03d}.png"))
    target = sample.float_images([args.view])[0]
    return {"view": args.view, "input_frames": frames, "mse": float(np.mean((rendered - target) ** 2))}


def cmd_sweep_thresholds(args, config: Config, run: Run) -> dict:
    from .train import evaluate, model_from_checkpoint, split_seeds

    model, ckpt = model_from_checkpoint(args.checkpoint)
    run.config = ckpt.config
    t = ckpt.config.train
    samples = _load_samples(args.data, split_seeds(t.seed)[1], t.n_eval_scenes, ckpt.config)
    report = evaluate(model, samples, args.frames or t.eval_frames)
    pairs = [(r.predictions, s.objects) for r, s in zip(report.scenes, samples)]
    rows = threshold_sweep(pairs, np.linspace(args.min_factor, args.max_factor, args.points),
                           Thresholds(scale_mode=args.scale_mode))
    write_sweep_csv(run.path("sweep.csv"), rows)
    return {"points": len(rows), "max_class_average": max(r["class_average"] for r in rows)}


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding preset sections")
    common.add_argument("--seed", type=int, help="override train.seed (also drives scene generation)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    common.add_argument("--run-dir", help="output directory (default runs/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="raysparse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="write a synthetic dataset")
    p.add_argument("--split", choices=["train", "eval"], default="train")
    p.add_argument("--n", type=int, help="number of scenes (default from config)")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("build-index", parents=[common], help="trace the ray/voxel index for one scene")
    p.add_argument("--scene", required=True, help="scene directory with cameras.json")
    p.add_argument("--frames", type=int, default=0, help="evenly spaced frames to use (0: all)")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("bench-memory", parents=[common], help="dense vs sparse attention storage and timing")
    p.add_argument("--views", type=int, help="number of views (default train.train_frames)")
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_bench_memory)

    p = sub.add_parser("train", parents=[common], help="two-phase training")
    p.add_argument("--data", help="training dataset directory (default: generate in memory)")
    p.add_argument("--eval-data", help="held-out dataset directory (default: generate in memory)")
    p.add_argument("--steps", type=int, help="total steps, phase 1 first (default from config)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: regenerate the held-out set)")
    p.add_argument("--frames", type=int, nargs="*", help="frame counts to evaluate (default train.eval_frames)")
    p.add_argument("--scale-mode", choices=["max", "mean"], default="max")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-mesh", parents=[common], help="posed OBJ meshes for a scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--frames", type=int, default=0)
    p.add_argument("--iso", type=float, default=0.5)
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("render-nvs", parents=[common], help="render a pool frame from the other frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--view", type=int, required=True, help="pool index of the frame to render")
    p.add_argument("--frames", type=int, default=4)
    p.set_defaults(func=cmd_render_nvs)

    p = sub.add_parser("sweep-thresholds", parents=[common], help="accuracy versus scaled thresholds (CSV)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--frames", type=int)
    p.add_argument("--min-factor", type=float, default=0.25)
    p.add_argument("--max-factor", type=float, default=3.0)
    p.add_argument("--points", type=int, default=12)
    p.add_argument("--scale-mode", choices=["max", "mean"], default="max")
    p.set_defaults(func=cmd_sweep_thresholds)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    config = _resolve_config(args)
    run = Run(args, config)
    result = args.func(args, config, run)
    run.finish({"result": result})
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
