"""Deterministic CSV reports plus a human-readable summary.

CSV content is a pure function of (config, seed): wall-clock numbers and
other non-reproducible values go only into the summary text file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from ..geometry import iou_bev
from .evaluate import greedy_match

PREDICTION_COLUMNS = [
    "scene", "frame", "proposal_id", "conf",
    "x", "y", "z", "l", "w", "h", "yaw",
    "matched_gt", "iou_before", "iou_after",
]


@dataclass
class ExperimentReport:
    name: str
    metrics: dict
    config: dict = field(default_factory=dict)
    seed: int = 0


def _fmt(value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, rows, columns):
    """Write dict rows with a fixed column order and newline discipline."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def write_report_csv(path, reports):
    keys = sorted({k for r in reports for k in r.metrics})
    columns = ["name", "seed"] + keys
    rows = []
    for r in reports:
        row = {"name": r.name, "seed": r.seed}
        row.update(r.metrics)
        rows.append(row)
    write_csv(path, rows, columns)


def prediction_rows(results, scenes, scene_ids=None):
    """Flatten pipeline outputs into prediction-dump rows."""
    rows = []
    ids = scene_ids or list(range(len(results)))
    for sid, result, scene in zip(ids, results, scenes):
        for fo in result.frames:
            _, gts = scene.frames[fo.frame_index]
            matches = {pi: (gj, iou) for pi, gj, iou in
                       greedy_match(fo.proposals, gts)}
            for pi, (box, conf) in enumerate(
                    zip(fo.refined, fo.confidences)):
                gj, iou_before = matches.get(pi, (-1, 0.0))
                iou_after = iou_bev(box, gts[gj]) if gj >= 0 else 0.0
                rows.append({
                    "scene": sid,
                    "frame": fo.frame_index,
                    "proposal_id": pi,
                    "conf": float(conf),
                    "x": float(box.center[0]),
                    "y": float(box.center[1]),
                    "z": float(box.center[2]),
                    "l": float(box.size[0]),
                    "w": float(box.size[1]),
                    "h": float(box.size[2]),
                    "yaw": float(box.yaw),
                    "matched_gt": gj,
                    "iou_before": float(iou_before),
                    "iou_after": float(iou_after),
                })
    return rows


def write_predictions_csv(path, rows):
    write_csv(path, rows, PREDICTION_COLUMNS)


def write_summary(path, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")
