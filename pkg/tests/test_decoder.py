"""Dual-layer decoder, residual coding, detection head and loss."""

import numpy as np
import pytest

from ftkn.decoder import (
    DetectionHead,
    DualDecoder,
    Refinement,
    confidence_target,
    decode_box,
    encode_box,
    refinement_loss,
)
from ftkn.geometry import Box7, wrap_yaw
from ftkn.nn import tensor as T
from ftkn.nn.layers import ConfigError
from ftkn.nn.tensor import Tensor
from ftkn.sequence import PAD_ID, TokenSequence

from _oracles import random_box


def _seq(rng, n, dim, n_pad=0):
    ids = np.arange(n, dtype=np.int64)
    if n_pad:
        ids[-n_pad:] = PAD_ID
    feats = rng.normal(size=(n, dim))
    feats[ids == PAD_ID] = 0.0
    return TokenSequence(Tensor(feats), ids, 0)


def test_encode_hand_values():
    prop = Box7([0, 0, 0], [3, 4, 2], 0.0)
    tgt = Box7([1, -2, 0.5], [6, 4, 1], 0.25)
    enc = encode_box(tgt, prop)
    np.testing.assert_allclose(enc[:3], [1 / 5, -2 / 5, 0.5 / 5])  # diag=5
    np.testing.assert_allclose(enc[3:6], [np.log(2), 0.0, np.log(0.5)])
    assert enc[6] == pytest.approx(0.25)


def test_encode_decode_round_trip_many():
    rng = np.random.default_rng(0)
    for _ in range(10000):
        prop, tgt = random_box(rng), random_box(rng)
        back = decode_box(prop, encode_box(tgt, prop))
        np.testing.assert_allclose(back.center, tgt.center, atol=1e-9)
        np.testing.assert_allclose(back.size, tgt.size, atol=1e-9)
        assert abs(wrap_yaw(back.yaw - tgt.yaw)) < 1e-9


def test_encode_decode_yaw_wrap():
    prop = Box7([0, 0, 0], [4, 2, 1], np.pi - 0.05)
    tgt = Box7([0, 0, 0], [4, 2, 1], -np.pi + 0.05)  # 0.1 apart across the seam
    enc = encode_box(tgt, prop)
    assert enc[6] == pytest.approx(0.1)
    back = decode_box(prop, enc)
    assert abs(wrap_yaw(back.yaw - tgt.yaw)) < 1e-12


def test_refinement_residual_shape():
    r = Refinement(0.5, np.arange(7.0).reshape(1, 7))
    assert r.box_residual.shape == (7,)
    with pytest.raises(ValueError):
        Refinement(0.5, np.arange(6.0))


def test_single_key_decoder_oracle():
    """One valid current-frame token: attention is forced to weight 1,
    so q_s = FFN(q + OutProj(VProj(f)))."""
    dim, heads = 8, 2
    dec = DualDecoder(dim, heads, np.random.default_rng(1))
    f = np.random.default_rng(2).normal(size=(1, dim))
    f_s = TokenSequence(Tensor(f), np.array([0], dtype=np.int64), 0)
    q_s = dec.first_layer(f_s)

    v = f @ dec.attn_s.v_proj.weight.data + dec.attn_s.v_proj.bias.data
    ctx = v @ dec.attn_s.out_proj.weight.data + dec.attn_s.out_proj.bias.data
    x = dec.query.data + ctx
    h = np.maximum(x @ dec.ffn_s.fc1.weight.data + dec.ffn_s.fc1.bias.data, 0)
    ref = h @ dec.ffn_s.fc2.weight.data + dec.ffn_s.fc2.bias.data
    np.testing.assert_allclose(q_s.data, ref, atol=1e-12)


def test_decoder_ignores_padded_keys():
    rng = np.random.default_rng(3)
    dim = 8
    dec = DualDecoder(dim, 2, np.random.default_rng(4))
    f_s = _seq(rng, 6, dim, n_pad=2)
    f_m = _seq(rng, 10, dim, n_pad=3)
    q_s, q_m = dec(f_s, f_m)

    trimmed_s = TokenSequence(
        Tensor(f_s.features.data[:4]), f_s.point_ids[:4], 0)
    trimmed_m = TokenSequence(
        Tensor(f_m.features.data[:7]), f_m.point_ids[:7], 0)
    ts, tm = dec(trimmed_s, trimmed_m)
    np.testing.assert_allclose(q_s.data, ts.data, atol=1e-12)
    np.testing.assert_allclose(q_m.data, tm.data, atol=1e-12)


def test_decoder_requires_fused_tokens():
    dec = DualDecoder(8, 2, np.random.default_rng(5))
    f_s = _seq(np.random.default_rng(6), 4, 8)
    with pytest.raises(ConfigError):
        dec(f_s, None)


def test_first_layer_bypass_returns_query():
    dec = DualDecoder(8, 2, np.random.default_rng(7))
    q = dec.first_layer(None)
    np.testing.assert_array_equal(q.data, dec.query.data)


def test_detection_head_predict():
    head = DetectionHead(8, np.random.default_rng(8))
    q = Tensor(np.random.default_rng(9).normal(size=(1, 8)))
    logit, residual = head(q)
    pred = head.predict(q)
    assert pred.confidence == pytest.approx(
        1.0 / (1.0 + np.exp(-logit.data[0, 0])))
    np.testing.assert_array_equal(pred.box_residual, residual.data[0])


def test_confidence_target_ramp():
    assert confidence_target(0.0) == 0.0
    assert confidence_target(0.25) == 0.0
    assert confidence_target(0.5) == pytest.approx(0.5)
    assert confidence_target(0.75) == 1.0
    assert confidence_target(1.0) == 1.0


def test_refinement_loss_negative_has_no_regression():
    logit = Tensor(np.array([[0.3]]))
    residual = Tensor(np.random.default_rng(10).normal(size=(1, 7)))
    prop = Box7([0, 0, 0], [4, 2, 1], 0.0)
    loss, breakdown = refinement_loss(logit, residual, prop, None, iou=0.3)
    assert breakdown["reg"] == 0.0
    assert loss.data == pytest.approx(breakdown["conf"])


def test_refinement_loss_positive_alpha_linearity():
    rng = np.random.default_rng(11)
    logit = Tensor(np.array([[0.1]]))
    residual = Tensor(rng.normal(size=(1, 7)))
    prop = Box7([0, 0, 0], [4, 2, 1], 0.0)
    gt = Box7([0.3, -0.1, 0], [4.2, 2.1, 1], 0.05)
    l2, b2 = refinement_loss(logit, residual, prop, gt, iou=0.8, alpha=2.0)
    l4, b4 = refinement_loss(logit, residual, prop, gt, iou=0.8, alpha=4.0)
    assert b2["reg"] == pytest.approx(b4["reg"])
    assert float(l4.data) - float(l2.data) == pytest.approx(2.0 * b2["reg"])


def test_refinement_loss_positive_needs_gt():
    logit = Tensor(np.array([[0.0]]))
    residual = Tensor(np.zeros((1, 7)))
    prop = Box7([0, 0, 0], [4, 2, 1], 0.0)
    with pytest.raises(ValueError):
        refinement_loss(logit, residual, prop, None, iou=0.9)
    with pytest.raises(ConfigError):
        refinement_loss(logit, residual, prop, None, iou=0.1, alpha=0.0)


def test_refinement_loss_gradient_flows():
    rng = np.random.default_rng(12)
    logit = Tensor(np.array([[0.2]]), requires_grad=True)
    residual = Tensor(rng.normal(size=(1, 7)), requires_grad=True)
    prop = Box7([0, 0, 0], [4, 2, 1], 0.0)
    gt = Box7([0.2, 0, 0], [4, 2, 1], 0.0)
    loss, _ = refinement_loss(logit, residual, prop, gt, iou=0.9)
    loss.backward()
    assert logit.grad is not None and residual.grad is not None
    assert np.abs(residual.grad).sum() > 0
