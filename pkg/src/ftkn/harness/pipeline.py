"""End-to-end inference over a scene: proposals in, refined boxes out."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..bank import FocalStore, assign_unique_ids, finalize_focal
from ..decoder import decode_box
from ..geometry import (
    PointSet,
    build_trajectory,
    cylindrical_sample,
    propagate_back,
    region_mask,
)
from ..nn.tensor import OpCounter, no_grad
from .rpn import mock_rpn


def worker_count():
    """Thread-pool size, capped by the FTKN_THREADS environment variable."""
    raw = os.environ.get("FTKN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def _map_maybe_parallel(fn, items):
    """Order-preserving map; results do not depend on the thread count."""
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def drop_points(pts, rate, rng):
    """Pad out a random subset of valid rows (robustness probe)."""
    if rate <= 0.0:
        return pts
    dropped = (rng.uniform(size=len(pts)) < rate) & pts.valid_mask
    keep = ~dropped
    return PointSet(
        np.where(keep[:, None], pts.coords, 0.0),
        np.where(keep[:, None], pts.extras, 0.0),
        np.where(keep, pts.timestamps, 0.0),
        np.where(keep, pts.ids, -1),
    )


def drop_boxes(traj, rate, rng, dt):
    """Replace randomly dropped history boxes with velocity proxies."""
    if rate <= 0.0:
        return traj
    boxes = list(traj.boxes)
    for i in range(len(boxes) - 2, -1, -1):
        if boxes[i].valid and rng.uniform() < rate:
            boxes[i] = propagate_back(boxes[i + 1], dt)
    return replace(traj, boxes=boxes)


def gather_history(traj, scene, bank, cfg, rng, *, current_frame,
                   drop_kind=None, drop_rate=0.0, augment=None):
    """K sampled points per trajectory slot, oldest first.

    Each slot samples from that frame's stored focal points when the
    bank has them, else falls back to the frame's full cloud (clamped to
    the scene for slots before frame 0); a slot whose region comes up
    completely empty borrows the current-frame sample instead, so the
    fusion stack never sees an all-padded sequence. Timestamps carry the
    offset to the current frame in seconds. `augment` is an optional
    hook applied to point-poor slots during training.
    """
    k = cfg.focal_k()
    dt = cfg.scene.dt
    if drop_kind == "boxes":
        traj = drop_boxes(traj, drop_rate, rng, dt)
    cur_cloud = scene.frames[min(max(current_frame, 0), len(scene) - 1)][0]
    out = []
    for box_t, frame_t in zip(traj.boxes, traj.frame_indices):
        src = bank.fetch(frame_t) if bank is not None and frame_t >= 0 else None
        if src is None or len(src) == 0:
            clamped = min(max(frame_t, 0), len(scene) - 1)
            src = scene.frames[clamped][0]
        pts = cylindrical_sample(src, box_t, k, rng)
        if augment is not None:
            pts = augment(pts, box_t, frame_t, rng)
        if not pts.valid_mask.any():
            pts = cylindrical_sample(cur_cloud, traj.current, k, rng)
        if drop_kind == "points" and frame_t != current_frame:
            pts = drop_points(pts, drop_rate, rng)
        stamps = np.full(len(pts), (frame_t - current_frame) * dt)
        pts = PointSet(pts.coords, pts.extras, stamps, pts.ids)
        out.append(pts)
    return traj, out


@dataclass
class FrameOutput:
    frame_index: int
    proposals: list
    refined: list
    confidences: list
    trajectories: list
    traces: list


@dataclass
class PipelineResult:
    frames: list
    bank: FocalStore
    telemetry: dict = field(default_factory=dict)


def run_pipeline(scene, model, cfg, seed, *, proposals_per_frame=None,
                 drop_kind=None, drop_rate=0.0, bank=None):
    """Refine every frame of a scene with the trained (or fresh) model.

    Per frame: mock proposals (unless provided), SSP with deduplicated
    focal storage, trajectory building, MSP over fetched history, dual
    decode, box decoding. Returns per-frame outputs plus telemetry
    (tokens per stage, attention cells, stored points, wall time).
    """
    rng = np.random.default_rng(seed)
    bank = bank or FocalStore(cfg.bank.t_max, cfg.bank.spill_dir or None)
    history = []  # history[0] = previous frame's proposals
    frames_out = []
    counter = OpCounter()
    t0 = time.perf_counter()
    with counter, no_grad():
        for f, (cloud, gts) in enumerate(scene.frames):
            if proposals_per_frame is not None:
                props = proposals_per_frame[f]
            else:
                props = mock_rpn(gts, cfg.rpn, rng, area=cfg.scene.area)
            seeds = rng.integers(0, 2**63 - 1, size=max(1, 2 * len(props)))
            # proposals over point-free regions skip the network entirely
            live = [i for i in range(len(props))
                    if region_mask(cloud, props[i]).any()]

            def _ssp(idx, _props=props, _cloud=cloud, _f=f, _seeds=seeds):
                prng = np.random.default_rng(_seeds[idx])
                return model.run_ssp(_cloud, _props[idx], _f, prng)

            ssp_outs = _map_maybe_parallel(_ssp, live)
            if ssp_outs:
                pool, imat = assign_unique_ids([o.sample for o in ssp_outs])
                i_star = np.stack(
                    [imat[m][o.positions] for m, o in enumerate(ssp_outs)])
                bank.store(f, finalize_focal(i_star, pool))
            else:
                bank.store(f, PointSet.empty())
            ssp_by_idx = dict(zip(live, ssp_outs))

            def _refine(idx, _props=props, _ssp=ssp_by_idx, _cloud=cloud,
                        _f=f, _seeds=seeds, _hist=list(history)):
                prng = np.random.default_rng(_seeds[len(_props) + idx])
                p = _props[idx]
                traj = build_trajectory(
                    p, _hist, cfg.fusion.frames, frame_dt=cfg.scene.dt,
                    current_frame=_f)
                if idx not in _ssp:
                    return replace(p, score=0.0), 0.0, traj, []
                traj, hist_pts = gather_history(
                    traj, scene, bank, cfg, prng, current_frame=_f,
                    drop_kind=drop_kind, drop_rate=drop_rate)
                fwd = model.forward_proposal(
                    _cloud, p, traj, hist_pts, _f, prng, ssp_out=_ssp[idx])
                ref = model.head_m.predict(fwd.q_m)
                box = decode_box(p, ref.box_residual)
                box = replace(box, score=ref.confidence)
                return box, ref.confidence, traj, fwd.trace

            refined = _map_maybe_parallel(_refine, list(range(len(props))))
            frames_out.append(FrameOutput(
                frame_index=f,
                proposals=props,
                refined=[r[0] for r in refined],
                confidences=[r[1] for r in refined],
                trajectories=[r[2] for r in refined],
                traces=[r[3] for r in refined],
            ))
            history.insert(0, props)
    wall_ms = (time.perf_counter() - t0) * 1e3
    telemetry = {
        "attention_cells": counter.attention_cells,
        "mul_adds": counter.mul_adds,
        "peak_live_values": counter.peak_live_values,
        "peak_stored_points": bank.peak_stored_points,
        "wall_ms": wall_ms,
    }
    return PipelineResult(frames=frames_out, bank=bank, telemetry=telemetry)
