"""Autodiff microkernel: gradients, graph mechanics, counters, guards."""

import gc

import numpy as np
import pytest

from ftkn.nn import tensor as T
from ftkn.nn.tensor import (
    NonFiniteError,
    OpCounter,
    ShapeError,
    Tensor,
    finite_checks,
    no_grad,
)

from _gradcases import OP_CASES, run_suite


@pytest.mark.parametrize("name,factory", OP_CASES, ids=[n for n, _ in OP_CASES])
def test_op_gradients_ten_seeds(name, factory):
    worst = max(run_suite(range(10), cases=[(name, factory)]).values())
    assert worst <= 1e-5, "%s worst rel err %.3g" % (name, worst)


def test_diamond_graph_accumulates():
    x = Tensor([[2.0, -3.0]], requires_grad=True)
    y = T.add(T.mul(x, x), x)  # x*x + x, x feeds two paths
    T.sum_all(y).backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0)


def test_deep_chain_iterative_backward():
    x = Tensor(np.ones((1, 1)), requires_grad=True)
    y = x
    for _ in range(3000):  # would blow the stack if backward recursed
        y = T.add(y, 1.0)
    T.sum_all(y).backward()
    assert x.grad.item() == 1.0


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        T.add(x, 1.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad and y._parents == ()


def test_matmul_rejects_bad_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.matmul(a, b)


def test_finite_checks_guard():
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])
    with finite_checks(False):
        t = Tensor([np.inf])  # guard off: accepted
    assert np.isinf(t.data[0])
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_unbroadcast_bias_row():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.zeros((1, 3)), requires_grad=True)
    T.sum_all(T.add(x, b)).backward()
    assert b.grad.shape == (1, 3)
    np.testing.assert_allclose(b.grad, 4.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    p = T.softmax_rows(Tensor(rng.normal(size=(5, 9)) * 10)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p >= 0).all()


def test_masked_softmax_matches_additive_masking():
    # multiplicative 0/1 gate == -inf additive bias on the same keys
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(4, 6))
    gate = np.array([[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]])
    p_gate = T.masked_softmax_rows(Tensor(scores), Tensor(gate)).data
    biased = np.where(gate > 0, scores, -np.inf)
    e = np.exp(biased - biased.max(axis=1, keepdims=True))
    np.testing.assert_allclose(p_gate, e / e.sum(axis=1, keepdims=True), atol=1e-15)
    assert (p_gate[:, gate[0] == 0.0] == 0.0).all()


def test_masked_softmax_rejects_fully_masked_row():
    with pytest.raises(ShapeError):
        T.masked_softmax_rows(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3))))


def test_max_over_rows_first_occurrence_tie():
    a = Tensor(np.array([[1.0, 5.0], [3.0, 5.0], [3.0, 2.0]]), requires_grad=True)
    out = T.max_over_rows(a)
    np.testing.assert_allclose(out.data, [[3.0, 5.0]])
    T.sum_all(out).backward()
    expected = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])  # ties to first row
    np.testing.assert_allclose(a.grad, expected)


def test_straight_through_forward_hard_backward_soft():
    soft = T.softmax_rows(Tensor(np.array([[0.1, 0.9, 0.3]]), requires_grad=True))
    hard = np.array([[0.0, 1.0, 0.0]])
    st = T.straight_through(soft, hard)
    np.testing.assert_array_equal(st.data, hard)
    w = np.array([[2.0, -1.0, 0.5]])
    T.sum_all(T.mul(st, w)).backward()
    np.testing.assert_allclose(soft.grad, w)  # gradient of sum(st*w) w.r.t. soft


def test_bce_with_logits_stable_and_correct():
    logit = Tensor(np.array([[1000.0, -1000.0, 0.0]]))
    loss = T.bce_with_logits(logit, np.array([[1.0, 0.0, 0.5]]))
    np.testing.assert_allclose(loss.data, np.log(2.0) / 3.0, atol=1e-12)


def test_smooth_l1_branches():
    pred = Tensor(np.array([[0.5, 3.0]]))
    loss = T.smooth_l1(pred, np.zeros((1, 2)))
    np.testing.assert_allclose(loss.data, (0.5 * 0.25 + (3.0 - 0.5)) / 2.0)


def test_opcounter_matmul_exact():
    with OpCounter() as c:
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
    assert c.mul_adds == 3 * 4 * 5


def test_opcounter_attention_cells_and_nesting():
    with OpCounter() as outer:
        T.count_attention_cells(10)
        with OpCounter() as inner:
            T.count_attention_cells(7)
    assert inner.attention_cells == 7
    assert outer.attention_cells == 17


def test_opcounter_peak_live_values():
    with OpCounter() as c:
        with no_grad():
            keep = Tensor(np.ones((10, 10)))
            for _ in range(3):
                tmp = Tensor(np.ones((10, 10)))  # noqa: F841 dies each loop
                del tmp
                gc.collect()
    assert 100 <= c.peak_live_values <= 300
    assert c.peak_live_values < 400  # temporaries were reclaimed, not hoarded


def test_gather_rows_accumulates_duplicates():
    a = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = T.gather_rows(a, np.array([1, 1, 0]))
    T.sum_all(out).backward()
    np.testing.assert_allclose(a.grad, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


def test_operator_sugar_matches_functions():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_allclose((ta + tb).data, a + b)
    np.testing.assert_allclose((ta - tb).data, a - b)
    np.testing.assert_allclose((ta * 2.0).data, a * 2.0)
    np.testing.assert_allclose((ta @ tb).data, a @ b)
    np.testing.assert_allclose((-ta).data, -a)
    np.testing.assert_allclose(ta.transpose().data, a.T)
