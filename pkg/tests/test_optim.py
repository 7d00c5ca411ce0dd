"""One-cycle Adam and the parameter checkpoint format."""

import numpy as np
import pytest

from ftkn.nn import tensor as T
from ftkn.nn.checkpoint import (
    CheckpointError,
    load_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from ftkn.nn.layers import Linear, Parameter
from ftkn.nn.optim import AdamOneCycle, one_cycle_lr
from ftkn.nn.tensor import Tensor


def test_one_cycle_shape():
    peak = 3e-4
    total = 100
    assert one_cycle_lr(0, total, peak) == pytest.approx(peak / 10)
    assert one_cycle_lr(30, total, peak) == pytest.approx(peak)  # warmup ends
    assert one_cycle_lr(100, total, peak) == pytest.approx(peak / 1000)
    # linear warmup: midpoint of the ramp
    mid = one_cycle_lr(15, total, peak)
    assert mid == pytest.approx((peak / 10 + peak) / 2)
    # decay is monotone after the peak
    lrs = [one_cycle_lr(s, total, peak) for s in range(30, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        one_cycle_lr(101, total, peak)


def test_adam_single_step_reference():
    p = Parameter("p", (2,), "zeros")
    p.tensor.data = np.array([1.0, -2.0])
    p.tensor.grad = np.array([0.5, -1.0])
    opt = AdamOneCycle([p], total_steps=10, peak_lr=1e-2)
    lr0 = opt.lr
    opt.step()
    g = np.array([0.5, -1.0])
    m_hat = g  # bias correction cancels on step 1
    v_hat = g * g
    ref = np.array([1.0, -2.0]) - lr0 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p.data, ref, atol=1e-15)


def test_adam_minimizes_quadratic():
    rng = np.random.default_rng(0)
    target = rng.normal(size=(4, 3))
    p = Parameter("w", (4, 3), "zeros")
    opt = AdamOneCycle([p], total_steps=800, peak_lr=0.05)
    for _ in range(800):
        opt.zero_grad()
        diff = T.add(p.tensor, Tensor(-target))
        T.sum_all(T.mul(diff, diff)).backward()
        opt.step()
    assert np.abs(p.data - target).max() < 1e-2


def test_adam_skips_gradless_params():
    a = Parameter("a", (2,), "ones")
    b = Parameter("b", (2,), "ones")
    a.tensor.grad = np.array([1.0, 1.0])
    opt = AdamOneCycle([a, b], total_steps=5, peak_lr=1e-3)
    opt.step()
    assert (b.data == 1.0).all()
    assert (a.data != 1.0).all()


def test_checkpoint_round_trip_exact(tmp_path):
    rng = np.random.default_rng(1)
    lin = Linear(5, 3, rng, "enc")
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, lin.parameters())
    state = load_checkpoint(path)
    assert set(state) == {"enc.weight", "enc.bias"}
    np.testing.assert_array_equal(state["enc.weight"], lin.weight.data)

    fresh = Linear(5, 3, np.random.default_rng(2), "enc")
    assert not np.array_equal(fresh.weight.data, lin.weight.data)
    restore_parameters(fresh.parameters(), state)
    np.testing.assert_array_equal(fresh.weight.data, lin.weight.data)


def test_checkpoint_rejects_duplicates(tmp_path):
    p = Parameter("same", (2,), "zeros")
    q = Parameter("same", (3,), "zeros")
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "dup.ckpt", [p, q])


def test_checkpoint_missing_and_mismatched(tmp_path):
    p = Parameter("w", (2, 2), "ones")
    path = tmp_path / "one.ckpt"
    save_checkpoint(path, [p])
    state = load_checkpoint(path)
    with pytest.raises(CheckpointError):
        restore_parameters([Parameter("other", (2, 2), "ones")], state)
    with pytest.raises(CheckpointError):
        restore_parameters([Parameter("w", (3, 2), "ones")], state)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
