"""Deduplicated per-frame storage of focal points.

Point identity is the global scene id carried on every PointSet row;
coordinates are never compared by float equality. Proposals overlap, so
the same physical point can be sampled many times per frame — the bank
stores it once.
"""

from __future__ import annotations

import os
import threading

import numpy as np

from .geometry import PointSet, read_scene_file, write_scene_file
from .sequence import PAD_ID


class BankError(RuntimeError):
    """Misuse of the focal store (double store, bad index matrix)."""


def assign_unique_ids(samples):
    """Merge per-proposal samples into one deduplicated PointSet.

    `samples` is a list of M equally sized PointSets (padding allowed).
    Returns (P, I): P holds each distinct point once, rows ordered by
    ascending id; I is the M x L matrix mapping every sample slot to its
    row in P, with -1 for padding slots.
    """
    if not samples:
        return PointSet.empty(), np.zeros((0, 0), dtype=np.int64)
    ids = np.stack([s.ids for s in samples])
    valid = ids != PAD_ID
    flat_ids = np.concatenate([s.ids for s in samples])
    flat_valid = flat_ids != PAD_ID
    uniq, first = np.unique(flat_ids[flat_valid], return_index=True)

    if uniq.size:
        index = np.where(valid, np.searchsorted(uniq, np.where(valid, ids, uniq[0])), -1)
    else:
        index = np.full(ids.shape, -1, dtype=np.int64)

    coords = np.concatenate([s.coords for s in samples])[flat_valid][first]
    extras = np.concatenate([s.extras for s in samples])[flat_valid][first]
    stamps = np.concatenate([s.timestamps for s in samples])[flat_valid][first]
    pool = PointSet(coords, extras, stamps, uniq)
    return pool, index.astype(np.int64)


def finalize_focal(i_star, pool):
    """Gather the distinct rows of `pool` referenced by an index matrix.

    `i_star` holds row indices into `pool` (or -1); the result keeps each
    referenced point once, in ascending id order.
    """
    i_star = np.asarray(i_star, dtype=np.int64)
    picked = i_star[i_star != PAD_ID]
    if picked.size and picked.max() >= len(pool):
        raise BankError("index %d beyond pool of %d rows" % (picked.max(), len(pool)))
    rows = np.unique(picked)
    return pool.take(rows)


class FocalStore:
    """Per-frame focal point storage with a sliding retention window.

    Frames older than (newest stored - capacity_frames) are evicted.
    Thread-safe: concurrent fetches and stores to distinct frames are
    fine; a fetch never sees a partially written frame. With `spill_dir`
    set, coordinates live on disk (scene-format, one file per frame) and
    only ids stay resident.
    """

    def __init__(self, capacity_frames=32, spill_dir=None):
        if capacity_frames < 1:
            raise BankError("capacity_frames must be positive")
        self.capacity_frames = capacity_frames
        self.spill_dir = spill_dir
        self._frames = {}
        self._meta = {}  # frame -> (ids, timestamps) when spilled
        self._lock = threading.Lock()
        self.peak_stored_points = 0
        if spill_dir is not None:
            os.makedirs(spill_dir, exist_ok=True)

    def _spill_path(self, frame_index):
        return os.path.join(self.spill_dir, "focal_%06d.bin" % frame_index)

    def store(self, frame_index, points):
        if np.unique(points.ids[points.valid_mask]).size != int(points.valid_mask.sum()):
            raise BankError("focal points must carry unique ids")
        with self._lock:
            if frame_index in self._frames or frame_index in self._meta:
                raise BankError("frame %d already stored" % frame_index)
            if self.spill_dir is not None:
                write_scene_file(self._spill_path(frame_index), [(points, [])])
                self._meta[frame_index] = (
                    points.ids.copy(), points.timestamps.copy())
            else:
                self._frames[frame_index] = points
            self._evict(frame_index)
            total = self._stored_count()
            if total > self.peak_stored_points:
                self.peak_stored_points = total

    def _evict(self, just_stored):
        newest = max(self._known_frames(), default=just_stored)
        cutoff = newest - self.capacity_frames
        for f in [f for f in self._known_frames() if f <= cutoff]:
            self._frames.pop(f, None)
            if self._meta.pop(f, None) is not None:
                try:
                    os.remove(self._spill_path(f))
                except OSError:
                    pass

    def _known_frames(self):
        return set(self._frames) | set(self._meta)

    def _stored_count(self):
        n = sum(len(p) for p in self._frames.values())
        n += sum(ids.shape[0] for ids, _ in self._meta.values())
        return n

    def fetch(self, frame_index):
        """The stored focal PointSet, or None for missing/evicted frames."""
        with self._lock:
            if frame_index in self._frames:
                return self._frames[frame_index]
            if frame_index in self._meta:
                ids, stamps = self._meta[frame_index]
                frames = read_scene_file(self._spill_path(frame_index))
                pts = frames[0][0]
                return PointSet(pts.coords, pts.extras, stamps, ids)
        return None

    def stored_points(self):
        with self._lock:
            return self._stored_count()

    def frames_held(self):
        with self._lock:
            return sorted(self._known_frames())
