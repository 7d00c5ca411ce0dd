"""Staged training: full-cloud history first, then materialized focal points.

The first epochs sample trajectory history straight from the raw clouds.
Once the network can pick useful focal points, an inference pass over
the training set materializes per-scene focal stores and later epochs
train against those, refreshed once more near the end. Point-poor
proposals are densified from neighboring frames while training.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from ..decoder import refinement_loss
from ..geometry import (
    PointSet,
    build_trajectory,
    cylindrical_sample,
    iou_bev,
    region_mask,
)
from ..model import FTKNModel
from ..nn import tensor as T
from ..nn.optim import AdamOneCycle
from ..scaling import supervised_targets
from .pipeline import gather_history, run_pipeline
from .rpn import mock_rpn

TEMP_START, TEMP_END = 1.0, 0.1


@dataclass
class TrainItem:
    scene_idx: int
    frame: int
    proposal: object
    trajectory: object
    gt: object      # matched Box7 or None
    iou: float


def epa_augment(pts, box_t, frame_t, scene, threshold, window, rng):
    """Fill padding slots with points borrowed from neighboring frames.

    Active only for slots whose region held fewer than `threshold`
    points. Borrowed points come from frames within +-window, sampled in
    the box region propagated to that frame by the box's own velocity,
    then shifted back to the current-frame position.
    """
    valid = int(pts.valid_mask.sum())
    if valid >= threshold:
        return pts
    dt = scene.dt
    slots = len(pts)
    coords = pts.coords.copy()
    extras = pts.extras.copy()
    stamps = pts.timestamps.copy()
    ids = pts.ids.copy()
    cursor = valid
    for off in sorted(range(-window, window + 1), key=abs):
        if off == 0 or cursor >= min(threshold, slots):
            continue
        n = frame_t + off
        if n < 0 or n >= len(scene):
            continue
        shift = np.array([box_t.velocity[0], box_t.velocity[1], 0.0]) * off * dt
        nbox = replace(box_t, center=box_t.center + shift)
        need = min(threshold, slots) - cursor
        borrowed = cylindrical_sample(scene.frames[n][0], nbox, need, rng)
        take = np.flatnonzero(borrowed.valid_mask)
        if take.size == 0:
            continue
        take = take[: slots - cursor]
        rows = slice(cursor, cursor + take.size)
        coords[rows] = borrowed.coords[take] - shift
        extras[rows] = borrowed.extras[take]
        stamps[rows] = pts.timestamps[0] if slots else 0.0
        ids[rows] = borrowed.ids[take]
        cursor += take.size
    return PointSet(coords, extras, stamps, ids)


def prepare_items(scenes, cfg, seed):
    """Fixed proposals, trajectories and GT matches for every scene.

    Training refines the trailing `item_frames` frames of each scene,
    where the history window is deepest. Proposals are drawn once and
    reused across epochs so the dataset is stable.
    """
    rng = np.random.default_rng(seed)
    items = []
    proposals_by_scene = []
    tail = max(1, cfg.train.item_frames)
    for s_idx, scene in enumerate(scenes):
        per_frame = [mock_rpn(gts, cfg.rpn, rng, area=cfg.scene.area)
                     for _, gts in scene.frames]
        proposals_by_scene.append(per_frame)
        for frame in range(max(0, len(scene) - tail), len(scene)):
            history = [per_frame[f] for f in range(frame - 1, -1, -1)]
            cloud, gts = scene.frames[frame]
            for p in per_frame[frame]:
                if not region_mask(cloud, p).any():
                    continue  # no evidence to refine against
                traj = build_trajectory(p, history, cfg.fusion.frames,
                                        frame_dt=scene.dt,
                                        current_frame=frame)
                best_gt, best_iou = None, 0.0
                for gt in gts:
                    ov = iou_bev(p, gt)
                    if ov > best_iou:
                        best_gt, best_iou = gt, ov
                items.append(TrainItem(s_idx, frame, p, traj, best_gt,
                                       best_iou))
    return items, proposals_by_scene


def materialize_banks(scenes, proposals_by_scene, model, cfg, seed):
    """Inference pass over the training scenes to fill focal stores."""
    banks = []
    for s_idx, scene in enumerate(scenes):
        res = run_pipeline(scene, model, cfg, seed=seed + s_idx,
                           proposals_per_frame=proposals_by_scene[s_idx])
        banks.append(res.bank)
    return banks


def _scorer_loss(fwd, gt, eta):
    """Point-box supervision for the trainable score heads (SSP layers)."""
    terms = []
    sample = fwd.ssp.sample
    coords = sample.coords
    valid = sample.valid_mask
    for res in fwd.ssp.results:
        if res.head_logits is None:
            break
        rows = np.flatnonzero(valid)
        if rows.size == 0:
            break
        targets = supervised_targets(coords[rows], gt, eta)
        logits = T.gather_rows(res.head_logits, rows)
        terms.append(T.bce_with_logits(logits, targets[:, None]))
        coords = coords[res.kept]
        valid = valid[res.kept]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _stratified_batches(pos_rows, neg_rows, tr, rng):
    """Batches with a guaranteed number of positive matches.

    Regression gradients come only from positives; with small batches an
    unlucky draw can starve a step of them entirely. Each batch takes
    `pos_per_batch` positives and tops up with negatives from a rolling
    shuffled queue.
    """
    k = min(tr.pos_per_batch, tr.batch)
    fill = tr.batch - k
    order = rng.permutation(len(pos_rows))
    batches = []
    queue: list = []
    for lo in range(0, len(order), k):
        rows = [pos_rows[i] for i in order[lo:lo + k]]
        for _ in range(fill):
            if not queue:
                queue = list(rng.permutation(len(neg_rows)))
            rows.append(neg_rows[queue.pop()])
        batches.append(rows)
    return batches


def staged_train(scenes, cfg, seed, *, progress=None):
    """Train a fresh model on `scenes`; returns (model, report dict)."""
    t0 = time.perf_counter()
    master = np.random.default_rng(seed)
    model = FTKNModel(cfg, master)
    items, proposals_by_scene = prepare_items(
        scenes, cfg, int(master.integers(2**63 - 1)))
    tr = cfg.train
    pos_rows = [i for i, it in enumerate(items)
                if it.gt is not None and it.iou >= tr.positive_iou]
    neg_rows = [i for i, it in enumerate(items)
                if it.gt is None or it.iou < tr.positive_iou]
    stratified = tr.pos_per_batch > 0 and pos_rows and neg_rows
    if stratified:
        steps_per_epoch = math.ceil(len(pos_rows)
                                    / min(tr.pos_per_batch, tr.batch))
    else:
        steps_per_epoch = max(1, math.ceil(len(items) / tr.batch))
    total_steps = tr.epochs * steps_per_epoch
    opt = AdamOneCycle(model.parameters(), total_steps=total_steps,
                       peak_lr=tr.lr)
    banks = None
    loss_curve = []
    step = 0
    epoch_rng = np.random.default_rng(seed + 1)
    for epoch in range(1, tr.epochs + 1):
        if epoch == tr.focal_after + 1 or epoch == tr.refresh_after + 1:
            banks = materialize_banks(
                scenes, proposals_by_scene, model, cfg, seed + 7000 * epoch)
        if stratified:
            batch_rows = _stratified_batches(pos_rows, neg_rows, tr,
                                             epoch_rng)
        else:
            order = epoch_rng.permutation(len(items))
            batch_rows = [order[lo:lo + tr.batch]
                          for lo in range(0, len(items), tr.batch)]
        for rows in batch_rows:
            batch = [items[i] for i in rows]
            model.zero_grad()
            temperature = TEMP_START + (TEMP_END - TEMP_START) * (
                step / max(1, total_steps - 1))
            total = None
            for item in batch:
                prng = np.random.default_rng(
                    np.random.SeedSequence([seed, epoch, int(item.scene_idx),
                                            step]))
                scene = scenes[item.scene_idx]
                cloud = scene.frames[item.frame][0]
                bank = banks[item.scene_idx] if banks is not None else None

                def _epa(pts, box_t, frame_t, rng, _scene=scene):
                    return epa_augment(pts, box_t, frame_t, _scene,
                                       tr.epa_threshold, tr.epa_window, rng)

                traj, hist = gather_history(
                    item.trajectory, scene, bank, cfg, prng,
                    current_frame=item.frame, augment=_epa)
                fwd = model.forward_proposal(
                    cloud, item.proposal, traj, hist, item.frame, prng,
                    training=True, temperature=temperature)
                loss, _ = refinement_loss(
                    fwd.conf_logit, fwd.residual, item.proposal, item.gt,
                    item.iou, alpha=tr.alpha, positive_iou=tr.positive_iou)
                aux, _ = refinement_loss(
                    fwd.aux_conf, fwd.aux_residual, item.proposal, item.gt,
                    item.iou, alpha=tr.alpha, positive_iou=tr.positive_iou)
                loss = T.add(loss, aux)
                if cfg.scaling.scorer == "supervised" and item.gt is not None:
                    extra = _scorer_loss(fwd, item.gt, cfg.scaling.eta)
                    if extra is not None:
                        loss = T.add(loss, extra)
                total = loss if total is None else T.add(total, loss)
            total = T.mul(total, 1.0 / len(batch))
            total.backward()
            opt.step()
            loss_curve.append(float(total.data))
            step += 1
        if progress is not None:
            progress(epoch, loss_curve[-1])
    window = min(50, max(1, len(loss_curve) // 4))
    smoothed = [float(np.mean(loss_curve[max(0, i - window + 1):i + 1]))
                for i in range(len(loss_curve))]
    report = {
        "steps": step,
        "loss_curve": loss_curve,
        "loss_smoothed": smoothed,
        "wall_s": time.perf_counter() - t0,
        "final_temperature": TEMP_END,
    }
    return model, report
