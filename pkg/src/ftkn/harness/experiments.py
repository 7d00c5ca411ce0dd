"""Ablations, robustness sweeps and the efficiency benchmark."""

from __future__ import annotations

import time

import numpy as np

from ..fusion import plan_schedule, simulate_schedule
from ..model import FTKNModel
from ..scaling import length_schedule
from .evaluate import evaluate
from .pipeline import run_pipeline
from .reports import ExperimentReport
from .scene import generate_scene

DROP_RATES = (0.0, 0.1, 0.2, 0.3)
DROP_KINDS = ("points", "boxes")


def robustness_sweep(model, scenes, cfg, seed, rates=DROP_RATES):
    """Inference-time random dropping of history points or boxes.

    No retraining: the trained model runs as-is at every (kind, rate)
    cell; rate 0 reproduces the baseline exactly.
    """
    reports = []
    for kind in DROP_KINDS:
        for rate in rates:
            results = [
                run_pipeline(s, model, cfg, seed + i,
                             drop_kind=kind, drop_rate=rate)
                for i, s in enumerate(scenes)
            ]
            metrics = dict(evaluate(results, scenes))
            metrics["drop_rate"] = rate
            reports.append(ExperimentReport(
                name="robust_%s_%g" % (kind, rate),
                metrics=metrics, config=cfg.flat(), seed=seed))
    return reports


def analytic_attention_cells(cfg, n_frames=1, n_proposals=1):
    """Exact attention-cell count per the length schedules.

    Counts query x key pairs per head for one proposal's forward pass,
    multiplied out over frames and proposals: the SSP stack, the MSP
    stages (scaling inside each sequence), the final scaling, and the
    two decoder layers.
    """
    h = cfg.model.heads
    budget = cfg.sample_budget()
    k = cfg.focal_k()
    cells = 0
    ssp = length_schedule(budget, cfg.scaling.beta1, cfg.scaling.ssp_layers, k)
    for n in ssp[:-1]:
        cells += h * n * n
    schedule = plan_schedule(cfg.fusion.frames, cfg.fusion.groups,
                             cfg.fusion.beta2, cfg.fusion_k_out(),
                             cfg.fusion.strategy)
    n_seq, length = cfg.fusion.frames, k
    for st in schedule.stages:
        cells += n_seq * h * length * length
        length = int(np.ceil(st.keep_ratio * length))
        n_seq = st.group_count
        length = st.group_size * length
    cells += h * length * length          # final scaling
    cells += h * 1 * k                    # decoder over f_s
    cells += h * 1 * schedule.final_length  # decoder over f_m
    return cells * n_frames * n_proposals


def _noscale_config(cfg):
    """The uncompressed baseline: keep ratios 1, full-budget history."""
    ns = cfg.clone()
    ns.scaling.beta1 = 1.0
    ns.fusion.beta2 = 1.0
    ns.sampling.k = cfg.sample_budget()
    ns.sampling.oversample = 1
    ns.fusion.k_out = cfg.fusion.frames * cfg.sample_budget()
    return ns


def bench_efficiency(cfg, seed, scene_cfg=None):
    """Default pipeline vs the no-scaling baseline on one scene.

    Returns (metrics dict, reports). Attention cells are also computed
    analytically from the schedules; stored points are compared against
    the total history cloud size.
    """
    scene_cfg = scene_cfg or cfg.scene
    scene = generate_scene(scene_cfg, seed)
    runs = {}
    for tag, run_cfg in (("default", cfg), ("noscale", _noscale_config(cfg))):
        model = FTKNModel(run_cfg, np.random.default_rng(seed))
        t0 = time.perf_counter()
        result = run_pipeline(scene, model, run_cfg, seed)
        wall = (time.perf_counter() - t0) * 1e3
        runs[tag] = {
            "attention_cells": result.telemetry["attention_cells"],
            "wall_ms": wall,
            "peak_points": result.telemetry["peak_stored_points"],
            "analytic_cells": analytic_attention_cells(run_cfg),
        }
    cloud_points = sum(len(pts) for pts, _ in scene.frames)
    metrics = {
        "cells_default": runs["default"]["attention_cells"],
        "cells_noscale": runs["noscale"]["attention_cells"],
        "cells_ratio": runs["noscale"]["attention_cells"]
        / max(1, runs["default"]["attention_cells"]),
        "analytic_cells_default": runs["default"]["analytic_cells"],
        "analytic_cells_noscale": runs["noscale"]["analytic_cells"],
        "wall_ms_default": runs["default"]["wall_ms"],
        "wall_ms_noscale": runs["noscale"]["wall_ms"],
        "peak_points_default": runs["default"]["peak_points"],
        "peak_points_noscale": runs["noscale"]["peak_points"],
        "full_cloud_points": cloud_points,
        "stored_ratio": cloud_points / max(1, runs["default"]["peak_points"]),
    }
    reports = [ExperimentReport("bench_%s" % tag, dict(run), cfg.flat(), seed)
               for tag, run in runs.items()]
    return metrics, reports


def _eval_variant(name, cfg, scenes, seed, model_kwargs=None, extra=None):
    model = FTKNModel(cfg, np.random.default_rng(seed), **(model_kwargs or {}))
    results = [run_pipeline(s, model, cfg, seed + i)
               for i, s in enumerate(scenes)]
    metrics = dict(evaluate(results, scenes))
    metrics["attention_cells"] = sum(
        r.telemetry["attention_cells"] for r in results)
    if extra:
        metrics.update(extra)
    return ExperimentReport(name, metrics, cfg.flat(), seed)


def ablation_suite(cfg, seed, scenes=None):
    """One tagged report row per paper-table cell.

    Architecture toggles, scorer variants, trajectory lengths, grouping
    strategies, a gamma sweep (pipeline runs on shared scenes), and the
    (beta1, beta2) grid (schedule-level rows: length traces and analytic
    attention cells; training each cell is out of desk budget).
    """
    if scenes is None:
        scenes = [generate_scene(cfg.scene, seed + i) for i in range(2)]
    reports = []

    toggles = [
        ("full", {}),
        ("no_ssp_decoder", {"use_ssp_decoder": False}),
        ("no_msp_decoder", {"use_msp_decoder": False}),
        ("concat_instead_of_igf", {"use_igf": False}),
        ("no_motion_embed", {"use_motion": False}),
    ]
    for name, kwargs in toggles:
        reports.append(_eval_variant(
            "toggle_%s" % name, cfg, scenes, seed, model_kwargs=kwargs))

    for scorer in ("adaptive", "supervised", "gumbel_mask", "random"):
        sc = cfg.clone()
        sc.scaling.scorer = scorer
        reports.append(_eval_variant("scorer_%s" % scorer, sc, scenes, seed))

    for frames in (4, 8, 16, 24, 32):
        tc = cfg.clone()
        tc.fusion.frames = frames
        tc.scene.frames = max(cfg.scene.frames, frames)
        t_scenes = [generate_scene(tc.scene, seed + i) for i in range(2)]
        reports.append(_eval_variant("frames_%d" % frames, tc, t_scenes, seed))

    for strategy in ("equal_stride", "contiguous", "anchored"):
        st = cfg.clone()
        st.fusion.strategy = strategy
        reports.append(_eval_variant("grouping_%s" % strategy, st, scenes, seed))

    for gamma in (1.0, 0.5, 0.25):
        gc = cfg.clone()
        gc.sampling.gamma = gamma
        reports.append(_eval_variant(
            "gamma_%g" % gamma, gc, scenes, seed,
            extra={"k": gc.focal_k(), "budget": gc.sample_budget()}))

    for b1 in (0.3, 0.4, 0.5, 0.6):
        for b2 in (0.3, 0.4, 0.5, 0.6):
            bc = cfg.clone()
            bc.scaling.beta1 = b1
            bc.fusion.beta2 = b2
            ssp = length_schedule(bc.sample_budget(), b1,
                                  bc.scaling.ssp_layers, bc.focal_k())
            schedule = plan_schedule(bc.fusion.frames, bc.fusion.groups, b2,
                                     bc.fusion_k_out(), bc.fusion.strategy)
            trace = simulate_schedule(bc.fusion.frames, bc.focal_k(), schedule)
            reports.append(ExperimentReport(
                "beta_%g_%g" % (b1, b2),
                {
                    "beta1": b1,
                    "beta2": b2,
                    "ssp_final": ssp[-1],
                    "msp_final": trace[-1][1],
                    "analytic_cells": analytic_attention_cells(bc),
                },
                bc.flat(), seed))
    return reports
