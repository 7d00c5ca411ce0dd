"""Boxes, point clouds, sampling, overlap and trajectory linking.

Everything here is plain numpy; gradients only enter through the small
embedding helpers that wrap an MLP around geometric offset features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .nn.tensor import Tensor
from .sequence import PAD_ID, TokenSequence

TWO_PI = 2.0 * np.pi

# factor applied to the box footprint when gathering nearby points
SAMPLE_DILATION = 1.2


def wrap_yaw(a):
    """Wrap an angle to [-pi, pi)."""
    return (a + np.pi) % TWO_PI - np.pi


@dataclass
class Box7:
    """Upright 3D box: center, size (l, w, h), yaw about +z.

    `velocity` is the BEV velocity (vx, vy); `valid` marks boxes that were
    actually observed rather than propagated as placeholders.
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray = field(default=None)
    score: float = 1.0
    class_id: int = 0
    valid: bool = True

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError("box size must be positive, got %r" % (self.size,))
        self.yaw = float(wrap_yaw(float(self.yaw)))
        if self.velocity is None:
            self.velocity = np.zeros(2)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        self.score = float(self.score)

    def as_row(self):
        return np.concatenate(
            [self.center, self.size, [self.yaw], self.velocity]
        )

    @staticmethod
    def from_row(row, score=1.0, class_id=0, valid=True):
        row = np.asarray(row, dtype=np.float64)
        vel = row[7:9] if row.shape[0] >= 9 else None
        return Box7(
            center=row[0:3], size=row[3:6], yaw=row[6],
            velocity=vel, score=score, class_id=class_id, valid=valid,
        )


def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Corner sign patterns in a fixed order: lexicographic over (x, y, z).
_CORNER_SIGNS = np.array(
    [(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
    dtype=np.float64,
)


def box_keypoints(box):
    """Center plus the 8 corners, world frame, shape (9, 3).

    Row 0 is the center; rows 1..8 follow `_CORNER_SIGNS`, so the layout
    is deterministic and rotation-consistent: the same physical corner
    always lands in the same row.
    """
    local = _CORNER_SIGNS * (box.size / 2.0)
    world = local @ rot_z(box.yaw).T + box.center
    return np.vstack([box.center[None, :], world])


def box_corners_bev(box):
    """BEV footprint corners, counter-clockwise, shape (4, 2)."""
    l2, w2 = box.size[0] / 2.0, box.size[1] / 2.0
    local = np.array([[l2, w2], [-l2, w2], [-l2, -w2], [l2, -w2]])
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + box.center[:2]


@dataclass
class PointSet:
    """A batch of points: coords (N,3), extras (N,R), timestamps (N,), ids (N,).

    Ids are global within a scene; PAD_ID rows are padding. Extras carry
    whatever per-point channels the source provides (intensity here).
    """

    coords: np.ndarray
    extras: np.ndarray
    timestamps: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = self.coords.shape[0]
        extras = np.asarray(self.extras, dtype=np.float64)
        if extras.size == 0:  # reshape(-1) is ambiguous on empty arrays
            width = extras.shape[1] if extras.ndim == 2 else 1
            self.extras = extras.reshape(n, width)
        else:
            self.extras = extras.reshape(n, -1)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(n)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(n)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def valid_mask(self):
        return self.ids != PAD_ID

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return PointSet(
            self.coords[idx], self.extras[idx],
            self.timestamps[idx], self.ids[idx],
        )

    @staticmethod
    def empty(extra_dim=1):
        return PointSet(
            np.zeros((0, 3)), np.zeros((0, extra_dim)),
            np.zeros(0), np.zeros(0, dtype=np.int64),
        )


def _pad_points(ps, count):
    n = len(ps)
    if n >= count:
        return ps
    extra = count - n
    return PointSet(
        np.vstack([ps.coords, np.zeros((extra, 3))]),
        np.vstack([ps.extras, np.zeros((extra, ps.extras.shape[1]))]),
        np.concatenate([ps.timestamps, np.zeros(extra)]),
        np.concatenate([ps.ids, np.full(extra, PAD_ID, dtype=np.int64)]),
    )


def region_mask(cloud, box):
    """Valid points inside the dilated vertical cylinder around `box`."""
    radius = np.hypot(box.size[0] / 2.0, box.size[1] / 2.0) * SAMPLE_DILATION
    z_half = box.size[2] * SAMPLE_DILATION / 2.0
    d_bev = np.hypot(
        cloud.coords[:, 0] - box.center[0], cloud.coords[:, 1] - box.center[1]
    )
    inside = (d_bev <= radius) & (
        np.abs(cloud.coords[:, 2] - box.center[2]) <= z_half
    )
    return inside & cloud.valid_mask


def cylindrical_sample(cloud, box, count, rng):
    """Points inside a dilated vertical cylinder around `box`.

    Radius is the BEV half-diagonal scaled by SAMPLE_DILATION and the
    z-window is the dilated box height, so slightly misplaced proposals
    still catch the object's points. Returns exactly `count` rows: a
    uniform without-replacement subsample when too many points fall
    inside (kept in original cloud order), zero padding with PAD_ID ids
    when too few.
    """
    idx = np.flatnonzero(region_mask(cloud, box))
    if idx.shape[0] > count:
        idx = np.sort(rng.choice(idx, size=count, replace=False))
    return _pad_points(cloud.take(idx), count)


def _masked_mlp_tokens(features, ids, mlp):
    """Run an MLP over raw features and zero out padded rows."""
    from .nn import tensor as T

    out = mlp(Tensor(features))
    mask = (ids != PAD_ID).astype(np.float64)[:, None]
    return T.mul(out, Tensor(mask))


def geometry_offsets(sample, box):
    """Per-point offsets to the 9 box keypoints, flattened (N, 27)."""
    kp = box_keypoints(box)
    return (sample.coords[:, None, :] - kp[None, :, :]).reshape(len(sample), 27)


def geometry_embed(sample, box, mlp, frame_index=0):
    """Embed sampled points relative to a box.

    Input per point: offsets to the 9 keypoints (27) plus the extra
    channels. Padded rows are zeroed after the MLP so downstream
    attention can mask them by id.
    """
    feats = np.hstack([geometry_offsets(sample, box), sample.extras])
    tokens = _masked_mlp_tokens(feats, sample.ids, mlp)
    return TokenSequence(tokens, sample.ids, frame_index=frame_index)


def motion_embed(hist, box_now, mlp, frame_index=0):
    """Embed history points relative to the *current* box.

    Same offset layout as `geometry_embed` plus a time-delta channel, so
    the decoder can tell how stale each point is.
    """
    feats = np.hstack(
        [
            geometry_offsets(hist, box_now),
            hist.extras,
            hist.timestamps[:, None],
        ]
    )
    tokens = _masked_mlp_tokens(feats, hist.ids, mlp)
    return TokenSequence(tokens, hist.ids, frame_index=frame_index)


# ---------------------------------------------------------------------------
# BEV overlap via convex polygon clipping


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman: clip a convex polygon by a CCW convex window."""
    out = list(subject)
    n_clip = clip.shape[0]
    for i in range(n_clip):
        a, b = clip[i], clip[(i + 1) % n_clip]
        edge = b - a
        if not out:
            return np.zeros((0, 2))
        pts = out
        out = []
        prev = pts[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for cur in pts:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            if cur_in != prev_in:
                # segment crosses the edge line; add the intersection
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                if denom != 0.0:  # parallel within rounding: endpoints lie on the edge
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    out.append(prev + t * d)
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.asarray(out) if out else np.zeros((0, 2))


def _polygon_area(pts):
    if pts.shape[0] < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def iou_bev(box_a, box_b):
    """Exact rotated-rectangle IoU in the BEV plane."""
    pa = box_corners_bev(box_a)
    pb = box_corners_bev(box_b)
    inter = _polygon_area(_clip_polygon(pa, pb))
    area_a = box_a.size[0] * box_a.size[1]
    area_b = box_b.size[0] * box_b.size[1]
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(inter / union, 1.0))


# ---------------------------------------------------------------------------
# Trajectory linking


@dataclass
class ProposalTrajectory:
    """T boxes for one object, oldest first; boxes[-1] is the current frame.

    `frame_indices[i]` gives the absolute frame of boxes[i]. Propagated
    placeholder boxes carry valid=False.
    """

    boxes: list
    frame_indices: list

    def __len__(self):
        return len(self.boxes)

    @property
    def current(self):
        return self.boxes[-1]


def propagate_back(box, dt):
    """The box one step earlier under its own constant-velocity model."""
    ghost = replace(
        box,
        center=box.center - np.array([box.velocity[0], box.velocity[1], 0.0]) * dt,
        valid=False,
    )
    return ghost


def build_trajectory(current, prev_frames, length, iou_thresh=0.5,
                     frame_dt=0.1, current_frame=None):
    """Chain a current box backwards through per-frame proposal lists.

    `prev_frames[0]` is the most recent past frame, `prev_frames[1]` the
    one before it, and so on. At each step the last linked box is
    projected back by its own negative velocity; the candidate with the
    best BEV IoU against that projection is linked when the overlap
    clears `iou_thresh`, otherwise the projection itself is kept as an
    invalid placeholder. Output has exactly `length` boxes, oldest first.
    `current_frame` sets the absolute frame index of `current` (defaults
    to len(prev_frames)).
    """
    cur_frame = len(prev_frames) if current_frame is None else current_frame
    boxes = [current]
    frames = [cur_frame]
    last = current
    for step in range(1, length):
        frame_idx = cur_frame - step
        ghost = propagate_back(last, frame_dt)
        chosen = ghost
        if frame_idx >= 0 and step - 1 < len(prev_frames):
            cands = prev_frames[step - 1]
            best, best_iou = None, iou_thresh
            for cand in cands:
                ov = iou_bev(ghost, cand)
                if ov >= best_iou:
                    best, best_iou = cand, ov
            if best is not None:
                chosen = best
        boxes.append(chosen)
        frames.append(frame_idx)
        last = chosen
    boxes.reverse()
    frames.reverse()
    return ProposalTrajectory(boxes=boxes, frame_indices=frames)


# ---------------------------------------------------------------------------
# Scene files: length-prefixed binary frames, little-endian

_FRAME_HEAD = struct.Struct("<II")
_POINT = struct.Struct("<4d")
_BOX = struct.Struct("<9dI")


def write_scene_file(path, frames):
    """Serialize frames of (PointSet, [Box7]) to a binary scene file.

    Per frame: frame index u32, point count u32, points as (x, y, z,
    intensity) f64, box count u32, boxes as 7 f64 pose + 2 f64 velocity +
    class u32. Timestamps and ids are not stored; readers re-derive them.
    """
    with open(path, "wb") as fh:
        for frame_index, (points, boxes) in enumerate(frames):
            keep = np.flatnonzero(points.valid_mask)
            fh.write(_FRAME_HEAD.pack(frame_index, keep.shape[0]))
            for i in keep:
                fh.write(
                    _POINT.pack(
                        points.coords[i, 0], points.coords[i, 1],
                        points.coords[i, 2], points.extras[i, 0],
                    )
                )
            fh.write(struct.pack("<I", len(boxes)))
            for b in boxes:
                fh.write(_BOX.pack(*b.as_row(), b.class_id))


def read_scene_file(path):
    """Read a scene file back into frames of (PointSet, [Box7]).

    Point ids are re-derived as a running counter across the whole file,
    so every point in the scene gets a distinct id. Timestamps are set
    to zero; the pipeline computes frame deltas relative to the frame it
    is refining, not from stored values.
    """
    frames = []
    next_id = 0
    with open(path, "rb") as fh:
        while True:
            head = fh.read(_FRAME_HEAD.size)
            if not head:
                break
            if len(head) < _FRAME_HEAD.size:
                raise ValueError("truncated frame header")
            frame_index, n_pts = _FRAME_HEAD.unpack(head)
            raw = fh.read(_POINT.size * n_pts)
            if len(raw) < _POINT.size * n_pts:
                raise ValueError("truncated point block")
            pts = np.frombuffer(raw, dtype="<f8").reshape(n_pts, 4)
            ids = np.arange(next_id, next_id + n_pts, dtype=np.int64)
            next_id += n_pts
            points = PointSet(
                coords=pts[:, :3].copy(),
                extras=pts[:, 3:4].copy(),
                timestamps=np.zeros(n_pts),
                ids=ids,
            )
            (n_box,) = struct.unpack("<I", fh.read(4))
            boxes = []
            for _ in range(n_box):
                vals = _BOX.unpack(fh.read(_BOX.size))
                boxes.append(Box7.from_row(np.array(vals[:9]), class_id=vals[9]))
            frames.append((frame_index, points, boxes))
    frames.sort(key=lambda f: f[0])
    return [(p, b) for _, p, b in frames]


def write_scene_text(path, frames):
    """Line-oriented text dump of a scene, for eyeballing and diffs."""
    with open(path, "w") as fh:
        for frame_index, (points, boxes) in enumerate(frames):
            keep = np.flatnonzero(points.valid_mask)
            fh.write("frame %d points %d boxes %d\n" % (
                frame_index, keep.shape[0], len(boxes)))
            for i in keep:
                fh.write("p %.6f %.6f %.6f %.6f\n" % (
                    points.coords[i, 0], points.coords[i, 1],
                    points.coords[i, 2], points.extras[i, 0]))
            for b in boxes:
                fh.write("b " + " ".join("%.6f" % v for v in b.as_row())
                         + " %d\n" % b.class_id)
