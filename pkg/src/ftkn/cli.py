"""Command-line entry points: generate / train / infer / eval / bench /
ablate / robust. All commands are deterministic given --config and
--seed; wall-clock numbers appear only in summary text files."""

from __future__ import annotations

import argparse
import dataclasses
import os

import numpy as np

from .config import desk_config, load_config, paper_shape_config
from .geometry import read_scene_file, write_scene_file
from .harness.evaluate import evaluate
from .harness.experiments import (
    ablation_suite,
    bench_efficiency,
    robustness_sweep,
)
from .harness.pipeline import run_pipeline
from .harness.reports import (
    prediction_rows,
    write_csv,
    write_predictions_csv,
    write_report_csv,
    write_summary,
)
from .harness.scene import SyntheticScene, generate_scene
from .harness.train import staged_train
from .model import FTKNModel
from .nn.checkpoint import load_checkpoint, restore_parameters, save_checkpoint

HOLDOUT_OFFSET = 10**6  # seed offset separating held-out scenes


def _build_scenes(cfg, seed, count, offset=0):
    return [generate_scene(cfg.scene, seed + offset + i) for i in range(count)]


def _load_scene_dir(path, dt):
    scenes = []
    for name in sorted(os.listdir(path)):
        if name.endswith(".bin"):
            frames = read_scene_file(os.path.join(path, name))
            scenes.append(SyntheticScene(frames=frames, dt=dt))
    return scenes


def _scenes_for(args, cfg, count, offset=0):
    if args.scenes:
        return _load_scene_dir(args.scenes, cfg.scene.dt)
    return _build_scenes(cfg, args.seed, count, offset)


def _model_for(args, cfg):
    model = FTKNModel(cfg, np.random.default_rng(args.seed))
    if getattr(args, "checkpoint", None):
        restore_parameters(model.parameters(), load_checkpoint(args.checkpoint))
    return model


def cmd_generate(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    names = []
    for i in range(cfg.scene.count):
        scene = generate_scene(cfg.scene, args.seed + i)
        name = "scene_%04d.bin" % i
        write_scene_file(os.path.join(args.out_dir, name), scene.frames)
        names.append(name)
    write_summary(os.path.join(args.out_dir, "manifest.txt"), names)
    print("wrote %d scenes to %s" % (len(names), args.out_dir))


def cmd_train(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    scenes = _scenes_for(args, cfg, cfg.scene.count)
    model, report = staged_train(
        scenes, cfg, args.seed,
        progress=lambda e, l: print("epoch %d loss %.4f" % (e, l)))
    save_checkpoint(os.path.join(args.out_dir, "ftkn.ckpt"),
                    model.parameters())
    rows = [{"step": i, "loss": l, "smoothed": s}
            for i, (l, s) in enumerate(
                zip(report["loss_curve"], report["loss_smoothed"]))]
    write_csv(os.path.join(args.out_dir, "train_loss.csv"), rows,
              ["step", "loss", "smoothed"])
    write_summary(os.path.join(args.out_dir, "train_summary.txt"), [
        "steps %d" % report["steps"],
        "final_loss %.6f" % report["loss_curve"][-1],
        "wall_s %.1f" % report["wall_s"],
    ])
    print("checkpoint and loss curve in %s" % args.out_dir)


def _run_inference(args, cfg):
    count = getattr(args, "count", None) or cfg.scene.count
    scenes = _scenes_for(args, cfg, count)
    model = _model_for(args, cfg)
    results = [run_pipeline(s, model, cfg, args.seed + i)
               for i, s in enumerate(scenes)]
    return scenes, results


def cmd_infer(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    scenes, results = _run_inference(args, cfg)
    rows = prediction_rows(results, scenes)
    write_predictions_csv(os.path.join(args.out_dir, "predictions.csv"), rows)
    wall = sum(r.telemetry["wall_ms"] for r in results)
    write_summary(os.path.join(args.out_dir, "infer_summary.txt"), [
        "scenes %d" % len(scenes),
        "predictions %d" % len(rows),
        "wall_ms %.1f" % wall,
    ])
    print("wrote %d predictions" % len(rows))


def cmd_eval(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    scenes, results = _run_inference(args, cfg)
    metrics = evaluate(results, scenes)
    write_csv(os.path.join(args.out_dir, "metrics.csv"), [metrics],
              sorted(metrics))
    write_summary(os.path.join(args.out_dir, "eval_summary.txt"),
                  ["%s %s" % (k, v) for k, v in sorted(metrics.items())])
    print("mean IoU %.4f -> %.4f" % (
        metrics["mean_iou_before"], metrics["mean_iou_after"]))


def cmd_bench(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    scene_cfg = dataclasses.replace(
        cfg.scene, frames=cfg.fusion.frames, objects=2, clutter_density=0.05)
    metrics, reports = bench_efficiency(cfg, args.seed, scene_cfg=scene_cfg)
    csv_keys = [k for k in sorted(metrics) if not k.startswith("wall_")]
    write_csv(os.path.join(args.out_dir, "efficiency.csv"),
              [{k: metrics[k] for k in csv_keys}], csv_keys)
    write_summary(os.path.join(args.out_dir, "bench_summary.txt"),
                  ["%s %s" % (k, v) for k, v in sorted(metrics.items())])
    print("attention cells ratio %.2f, wall %.0fms vs %.0fms" % (
        metrics["cells_ratio"], metrics["wall_ms_default"],
        metrics["wall_ms_noscale"]))


def cmd_ablate(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    reports = ablation_suite(cfg, args.seed)
    write_report_csv(os.path.join(args.out_dir, "ablations.csv"), reports)
    print("wrote %d ablation rows" % len(reports))


def cmd_robust(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    count = getattr(args, "count", None) or 2
    scenes = _scenes_for(args, cfg, count)
    model = _model_for(args, cfg)
    reports = robustness_sweep(model, scenes, cfg, args.seed)
    write_report_csv(os.path.join(args.out_dir, "robustness.csv"), reports)
    print("wrote %d robustness rows" % len(reports))


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "robust": cmd_robust,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ftkn", description="focal-token refinement pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or TOML config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default="out")
        if name in ("train", "infer", "eval", "robust"):
            p.add_argument("--scenes", help="directory of generated scenes")
            p.add_argument("--count", type=int, help="scene count override")
        if name in ("infer", "eval", "robust"):
            p.add_argument("--checkpoint", help="trained parameter file")
    args = parser.parse_args(argv)
    base = paper_shape_config() if args.command == "bench" else desk_config()
    cfg = load_config(args.config, base) if args.config else base
    _COMMANDS[args.command](args, cfg)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
