"""Deduplicating focal-point storage: merge, finalize, retention."""

import numpy as np
import pytest

from ftkn.bank import BankError, FocalStore, assign_unique_ids, finalize_focal
from ftkn.geometry import PointSet
from ftkn.sequence import PAD_ID


def _points(ids, base=0.0):
    ids = np.asarray(ids, dtype=np.int64)
    coords = np.where(
        (ids != PAD_ID)[:, None],
        ids[:, None] * np.array([1.0, 2.0, 3.0]) + base, 0.0)
    extras = np.where((ids != PAD_ID)[:, None], ids[:, None] * 0.1, 0.0)
    return PointSet(coords, extras, np.zeros(len(ids)), ids)


def _random_overlap_pattern(rng, universe, m, l):
    """M proposals sampling `l` slots each from `universe` points, padded."""
    samples = []
    for _ in range(m):
        n_real = int(rng.integers(0, min(l, len(universe)) + 1))
        ids = np.full(l, PAD_ID, dtype=np.int64)
        if n_real:
            ids[:n_real] = rng.choice(universe, size=n_real, replace=False)
        samples.append(_points(ids))
    return samples


def test_assign_unique_ids_hand_case():
    a = _points([3, 7, PAD_ID])
    b = _points([7, 1, 3])
    pool, imat = assign_unique_ids([a, b])
    np.testing.assert_array_equal(pool.ids, [1, 3, 7])  # ascending, distinct
    np.testing.assert_array_equal(imat, [[1, 2, -1], [2, 0, 1]])
    # pooled rows carry the coordinates of their first appearance
    np.testing.assert_allclose(pool.coords[1], [3.0, 6.0, 9.0])


def test_assign_unique_ids_empty_inputs():
    pool, imat = assign_unique_ids([])
    assert len(pool) == 0 and imat.shape == (0, 0)
    pool2, imat2 = assign_unique_ids([_points([PAD_ID, PAD_ID])])
    assert len(pool2) == 0
    np.testing.assert_array_equal(imat2, [[-1, -1]])


def test_dedup_oracle_randomized_patterns():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 60))
        universe = np.arange(n, dtype=np.int64)
        m, l = int(rng.integers(1, 8)), int(rng.integers(1, 12))
        samples = _random_overlap_pattern(rng, universe, m, l)
        pool, imat = assign_unique_ids(samples)

        distinct = set()
        for s in samples:
            distinct.update(int(i) for i in s.ids if i != PAD_ID)
        assert len(pool) == len(distinct)
        assert len(pool) <= min(m * l, n)
        # index matrix reproduces every sample slot
        for si, s in enumerate(samples):
            for slot in range(l):
                if s.ids[slot] == PAD_ID:
                    assert imat[si, slot] == -1
                else:
                    assert pool.ids[imat[si, slot]] == s.ids[slot]


def test_finalize_focal_unique_sorted():
    pool = _points([2, 5, 9, 11])
    i_star = np.array([[3, 0, -1], [0, 3, 1]])
    focal = finalize_focal(i_star, pool)
    np.testing.assert_array_equal(focal.ids, [2, 5, 11])
    with pytest.raises(BankError):
        finalize_focal(np.array([[4]]), pool)


def test_store_round_trip_and_missing():
    store = FocalStore(capacity_frames=8)
    pts = _points([4, 9, 1])
    store.store(0, pts)
    got = store.fetch(0)
    np.testing.assert_array_equal(got.ids, pts.ids)
    np.testing.assert_array_equal(got.coords, pts.coords)
    assert store.fetch(3) is None
    assert store.frames_held() == [0]


def test_store_rejects_duplicate_frame_and_ids():
    store = FocalStore()
    store.store(0, _points([1, 2]))
    with pytest.raises(BankError):
        store.store(0, _points([3]))
    with pytest.raises(BankError):
        store.store(1, _points([5, 5]))
    with pytest.raises(BankError):
        FocalStore(capacity_frames=0)


def test_eviction_window():
    store = FocalStore(capacity_frames=3)
    for f in range(6):
        store.store(f, _points([10 + f]))
    # newest is 5; frames <= 5-3 are gone
    assert store.frames_held() == [3, 4, 5]
    assert store.fetch(2) is None
    assert store.fetch(3) is not None


def test_larger_capacity_never_holds_less():
    for cap_small, cap_big in [(2, 4), (3, 32)]:
        small, big = FocalStore(cap_small), FocalStore(cap_big)
        for f in range(10):
            small.store(f, _points([f]))
            big.store(f, _points([f]))
        assert set(small.frames_held()) <= set(big.frames_held())


def test_peak_stored_points_tracks_resident_total():
    store = FocalStore(capacity_frames=2)
    store.store(0, _points([1, 2, 3]))
    store.store(1, _points([4, 5]))
    assert store.peak_stored_points == 5
    store.store(2, _points([6]))  # evicts frame 0
    assert store.stored_points() == 3
    assert store.peak_stored_points == 5


def test_spill_mode_round_trip(tmp_path):
    spill = tmp_path / "bank"
    store = FocalStore(capacity_frames=2, spill_dir=str(spill))
    pts = _points([7, 2, 9])
    pts.timestamps[:] = [-0.3, -0.2, -0.1]
    store.store(0, pts)
    assert len(list(spill.iterdir())) == 1
    got = store.fetch(0)
    np.testing.assert_array_equal(np.sort(got.ids), [2, 7, 9])
    np.testing.assert_allclose(got.timestamps, pts.timestamps)
    np.testing.assert_allclose(got.coords, pts.coords)

    store.store(1, _points([1]))
    store.store(5, _points([3]))  # far ahead: frames 0 and 1 drop off disk
    assert store.fetch(0) is None
    assert len(list(spill.iterdir())) == 1
