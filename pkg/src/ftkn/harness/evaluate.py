"""Matched-IoU evaluation of refined boxes against ground truth."""

from __future__ import annotations

import numpy as np

from ..geometry import iou_bev, region_mask

SPARSE_SPLIT = 28  # point count separating the sparse/dense buckets


def greedy_match(proposals, gts):
    """Score-ordered greedy one-to-one matching.

    Proposals are visited by descending score (ties by index); each takes
    the unmatched ground-truth box with the highest BEV IoU, if any
    overlap exists. Returns (proposal_idx, gt_idx, iou) triples.
    """
    order = sorted(range(len(proposals)),
                   key=lambda i: (-proposals[i].score, i))
    taken = set()
    matches = []
    for i in order:
        best_j, best_iou = None, 0.0
        for j, gt in enumerate(gts):
            if j in taken:
                continue
            ov = iou_bev(proposals[i], gt)
            if ov > best_iou:
                best_j, best_iou = j, ov
        if best_j is not None:
            taken.add(best_j)
            matches.append((i, best_j, best_iou))
    return matches


def _gt_point_count(cloud, gt):
    return int(region_mask(cloud, gt).sum())


def evaluate(scene_results, scenes):
    """Aggregate before/after IoU and recall over pipeline outputs.

    Matching runs once on the raw proposals (score-ordered, greedy); the
    refined box of each matched proposal is compared against the same
    ground truth, so the before/after columns describe identical pairs.
    Buckets split ground truths by point count in their frame's cloud.
    """
    before, after = [], []
    bucket = {"sparse": [], "dense": []}
    gt_total = 0
    hits_50 = hits_70 = 0
    for result, scene in zip(scene_results, scenes):
        for fo in result.frames:
            cloud, gts = scene.frames[fo.frame_index]
            gt_total += len(gts)
            matches = greedy_match(fo.proposals, gts)
            for pi, gj, iou_prop in matches:
                iou_ref = iou_bev(fo.refined[pi], gts[gj])
                before.append(iou_prop)
                after.append(iou_ref)
                if iou_ref >= 0.5:
                    hits_50 += 1
                if iou_ref >= 0.7:
                    hits_70 += 1
                key = ("sparse" if _gt_point_count(cloud, gts[gj]) < SPARSE_SPLIT
                       else "dense")
                bucket[key].append(iou_ref)
    metrics = {
        "matched": len(before),
        "gt_total": gt_total,
        "mean_iou_before": float(np.mean(before)) if before else 0.0,
        "mean_iou_after": float(np.mean(after)) if after else 0.0,
        "recall_050": hits_50 / gt_total if gt_total else 0.0,
        "recall_070": hits_70 / gt_total if gt_total else 0.0,
        "iou_sparse": float(np.mean(bucket["sparse"])) if bucket["sparse"] else 0.0,
        "iou_dense": float(np.mean(bucket["dense"])) if bucket["dense"] else 0.0,
    }
    metrics["iou_gain"] = metrics["mean_iou_after"] - metrics["mean_iou_before"]
    return metrics
