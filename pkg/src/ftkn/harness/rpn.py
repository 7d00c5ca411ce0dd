"""Mock region proposals: jittered ground truth plus false positives."""

from __future__ import annotations

import numpy as np

from ..geometry import Box7, wrap_yaw
from ..nn.layers import ConfigError


def mock_rpn(gt_boxes, rpn_cfg, rng, area=40.0):
    """Noisy proposals for one frame.

    Every ground-truth box survives with probability `recall` and gets
    Gaussian pose jitter; false positives arrive at a Poisson rate per
    frame. Velocities are ground truth plus noise. With zero noise,
    recall 1 and fp_rate 0 the proposals equal the ground truth.
    """
    if not (0.0 < rpn_cfg.recall <= 1.0):
        raise ConfigError("recall must be in (0, 1]")
    proposals = []
    for gt in gt_boxes:
        if rng.uniform() > rpn_cfg.recall:
            continue
        center = gt.center + rng.normal(0.0, rpn_cfg.sigma_xyz, size=3)
        size = gt.size * np.exp(rng.normal(0.0, rpn_cfg.sigma_size, size=3))
        yaw = wrap_yaw(gt.yaw + rng.normal(0.0, rpn_cfg.sigma_yaw))
        velocity = gt.velocity + rng.normal(0.0, rpn_cfg.sigma_xyz, size=2)
        score = float(np.clip(rng.normal(0.85, 0.05), 0.0, 1.0))
        proposals.append(Box7(center, size, yaw, velocity=velocity,
                              score=score, class_id=gt.class_id))
    n_fp = int(rng.poisson(rpn_cfg.fp_rate))
    for _ in range(n_fp):
        center = np.array([
            rng.uniform(-area, area),
            rng.uniform(-area, area),
            rng.uniform(0.5, 1.5),
        ])
        size = np.array([
            rng.uniform(3.0, 5.5), rng.uniform(1.5, 2.2), rng.uniform(1.3, 2.0)])
        proposals.append(Box7(
            center, size, rng.uniform(-np.pi, np.pi),
            velocity=rng.normal(0.0, 2.0, size=2),
            score=float(np.clip(rng.normal(0.45, 0.1), 0.0, 1.0)),
            class_id=0))
    return proposals
