"""Synthetic multi-frame point-cloud scenes.

Objects follow constant velocity with a small Gaussian wobble; points
are sampled on box surfaces with a density that falls off with the
square of range from the sensor at the origin, so far objects carry few
points and near ones carry hundreds. Background clutter is uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Box7, PointSet, rot_z, wrap_yaw

SENSOR_HEIGHT = 1.0
REFERENCE_RANGE = 8.0   # range at which an object gets the full point budget
SURFACE_NOISE = 0.02

# (l, w, h) low/high per class: 0 vehicle-like, 1 pedestrian-like
SIZE_RANGES = {
    0: (np.array([3.6, 1.6, 1.4]), np.array([5.4, 2.2, 2.0])),
    1: (np.array([0.5, 0.5, 1.5]), np.array([0.9, 0.9, 1.9])),
}


@dataclass
class SyntheticScene:
    frames: list  # (PointSet, [Box7]) per frame
    dt: float = 0.1

    def __len__(self):
        return len(self.frames)


def _sample_object(cfg, rng):
    class_id = int(rng.integers(0, 2)) if rng.uniform() < 0.3 else 0
    lo, hi = SIZE_RANGES[class_id]
    size = rng.uniform(lo, hi)
    # spawn away from the sensor so the range-density model has spread
    r = rng.uniform(0.2, 0.95) * cfg.area
    angle = rng.uniform(-np.pi, np.pi)
    center = np.array([r * np.cos(angle), r * np.sin(angle), size[2] / 2.0])
    yaw = rng.uniform(-np.pi, np.pi)
    speed = rng.uniform(0.0, cfg.speed_max if class_id == 0 else 1.5)
    velocity = speed * np.array([np.cos(yaw), np.sin(yaw)])
    return Box7(center, size, yaw, velocity=velocity, class_id=class_id)


def _point_budget(box, cfg, rng):
    r = max(np.hypot(box.center[0], box.center[1]), 1.0)
    n = cfg.point_max * (REFERENCE_RANGE / r) ** 2
    n *= rng.uniform(0.8, 1.2)
    return int(np.clip(round(n), cfg.point_min, cfg.point_max))


def _surface_points(box, count, rng):
    """Uniform points on the box surface, world frame, with jitter."""
    l, w, h = box.size
    faces = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=count, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    axis = face // 2
    others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    rows = np.arange(count)
    local = np.empty((count, 3))
    local[rows, axis] = sign
    local[rows, others[:, 0]] = u
    local[rows, others[:, 1]] = v
    local *= box.size
    pts = local @ rot_z(box.yaw).T + box.center
    pts += rng.normal(0.0, SURFACE_NOISE, size=pts.shape)
    return pts


def generate_scene(cfg, seed):
    """A deterministic scene: `cfg.frames` frames of points plus GT boxes."""
    rng = np.random.default_rng(seed)
    objects = [_sample_object(cfg, rng) for _ in range(cfg.objects)]
    n_clutter = int(cfg.clutter_density * (2.0 * cfg.area) ** 2)
    frames = []
    next_id = 0
    centers = [o.center.copy() for o in objects]
    for _ in range(cfg.frames):
        clouds = []
        boxes = []
        for obj, center in zip(objects, centers):
            box = Box7(center.copy(), obj.size, obj.yaw,
                       velocity=obj.velocity, class_id=obj.class_id)
            boxes.append(box)
            n = _point_budget(box, cfg, rng)
            clouds.append(_surface_points(box, n, rng))
        if n_clutter:
            bg = np.column_stack([
                rng.uniform(-cfg.area, cfg.area, n_clutter),
                rng.uniform(-cfg.area, cfg.area, n_clutter),
                rng.uniform(0.0, 2.5, n_clutter),
            ])
            clouds.append(bg)
        coords = np.vstack(clouds) if clouds else np.zeros((0, 3))
        n_pts = coords.shape[0]
        points = PointSet(
            coords=coords,
            extras=rng.uniform(0.0, 1.0, size=(n_pts, 1)),
            timestamps=np.zeros(n_pts),
            ids=np.arange(next_id, next_id + n_pts, dtype=np.int64),
        )
        next_id += n_pts
        frames.append((points, boxes))
        # advance motion: constant velocity plus wobble
        for obj, center in zip(objects, centers):
            v = obj.velocity + rng.normal(0.0, cfg.wobble, size=2)
            center[0] += v[0] * cfg.dt
            center[1] += v[1] * cfg.dt
    return SyntheticScene(frames=frames, dt=cfg.dt)
