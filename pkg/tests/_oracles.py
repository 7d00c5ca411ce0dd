"""Independent brute-force oracles shared by unit and acceptance tests."""

import numpy as np

from ftkn.geometry import Box7, box_corners_bev


def random_box(rng, center_span=4.0):
    return Box7(
        center=np.append(rng.uniform(-center_span, center_span, 2), 0.0),
        size=rng.uniform(0.8, 5.0, 3),
        yaw=rng.uniform(-np.pi, np.pi),
    )


def _inside_bev(xy, box):
    d = xy - box.center[:2]
    c, s = np.cos(-box.yaw), np.sin(-box.yaw)
    lx = d[:, 0] * c - d[:, 1] * s
    ly = d[:, 0] * s + d[:, 1] * c
    return (np.abs(lx) <= box.size[0] / 2.0) & (np.abs(ly) <= box.size[1] / 2.0)


def mc_iou_bev(box_a, box_b, grid_n, rng):
    """Stratified (jittered-grid) Monte Carlo estimate of BEV IoU.

    One uniform point per cell of an n x n grid over the joint bounding
    rectangle; stratification shrinks the error to the boundary cells,
    so 1000x1000 resolves IoU well below 1e-3.
    """
    corners = np.vstack([box_corners_bev(box_a), box_corners_bev(box_b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    span = hi - lo
    step = span / grid_n
    ii, jj = np.meshgrid(np.arange(grid_n), np.arange(grid_n), indexing="ij")
    jitter = rng.uniform(size=(grid_n * grid_n, 2))
    pts = lo + (np.stack([ii.ravel(), jj.ravel()], axis=1) + jitter) * step
    in_a = _inside_bev(pts, box_a)
    in_b = _inside_bev(pts, box_b)
    cell = step[0] * step[1]
    inter = np.count_nonzero(in_a & in_b) * cell
    union = np.count_nonzero(in_a | in_b) * cell
    if union == 0.0:
        return 0.0
    return inter / union
