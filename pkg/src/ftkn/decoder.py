"""Dual-layer decoder, detection head, box residual coding and losses.

A learnable query cross-attends first into the current-frame focal
tokens, then into the fused temporal tokens; two small heads turn the
decoded vector into a confidence and a 7-value box residual.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import wrap_yaw
from .nn import tensor as T
from .nn.layers import (
    ConfigError,
    FeedForward,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
)

POSITIVE_IOU = 0.55


@dataclass
class Refinement:
    """Head output: calibrated confidence plus a normalized box residual."""

    confidence: float
    box_residual: np.ndarray

    def __post_init__(self):
        self.box_residual = np.asarray(self.box_residual, dtype=np.float64).reshape(7)


def encode_box(target, proposal):
    """Residual of `target` relative to `proposal`.

    Center deltas are normalized by the proposal's BEV diagonal, sizes
    are log-ratios, yaw is a wrapped direct difference. decode_box
    inverts this exactly.
    """
    diag = np.hypot(proposal.size[0], proposal.size[1])
    return np.concatenate([
        (target.center - proposal.center) / diag,
        np.log(target.size / proposal.size),
        [wrap_yaw(target.yaw - proposal.yaw)],
    ])


def decode_box(proposal, residual):
    residual = np.asarray(residual, dtype=np.float64).reshape(7)
    diag = np.hypot(proposal.size[0], proposal.size[1])
    return replace(
        proposal,
        center=proposal.center + residual[:3] * diag,
        size=proposal.size * np.exp(residual[3:6]),
        yaw=wrap_yaw(proposal.yaw + residual[6]),
    )


class DualDecoder(Module):
    """q -> attend over f_s -> q_s -> attend over f_m -> q_m.

    Each layer is literally FFN(q + Attn(q, f, f)) with padded keys
    masked. The first layer can be bypassed (current-frame branch off),
    in which case the raw query feeds the second layer.
    """

    def __init__(self, dim, heads, rng, name="decoder"):
        self.query = Parameter(name + ".query", (1, dim), "uniform-fan-in", rng)
        self.attn_s = MultiHeadAttention(dim, heads, rng, name + ".attn_s")
        self.ffn_s = FeedForward(dim, rng, name + ".ffn_s")
        self.attn_m = MultiHeadAttention(dim, heads, rng, name + ".attn_m")
        self.ffn_m = FeedForward(dim, rng, name + ".ffn_m")

    def first_layer(self, f_s):
        """q_s from the current-frame tokens; raw query when f_s is None."""
        q = self.query.tensor
        if f_s is None:
            return q
        ctx, _ = self.attn_s(q, f_s.features, f_s.features,
                             key_mask=f_s.valid_mask)
        return self.ffn_s(T.add(q, ctx))

    def __call__(self, f_s, f_m):
        if f_m is None or len(f_m) == 0:
            raise ConfigError("decoder needs a fused temporal sequence")
        q_s = self.first_layer(f_s)
        ctx_m, _ = self.attn_m(q_s, f_m.features, f_m.features,
                               key_mask=f_m.valid_mask)
        q_m = self.ffn_m(T.add(q_s, ctx_m))
        return q_s, q_m


class DetectionHead(Module):
    """Confidence logit and box residual from a decoded query vector."""

    def __init__(self, dim, rng, name="head"):
        # zero weights: refinement starts as the identity on the proposal
        # and confidence starts uncommitted, so neither head pushes
        # gradients into the trunk before the queries carry signal
        self.conf = Linear(dim, 1, rng, name + ".conf", init="zeros")
        self.box = Linear(dim, 7, rng, name + ".box", init="zeros")

    def __call__(self, q):
        return self.conf(q), self.box(q)

    def predict(self, q):
        logit, residual = self(q)
        conf = 1.0 / (1.0 + np.exp(-logit.data[0, 0]))
        return Refinement(conf, residual.data[0].copy())


def confidence_target(iou):
    """IoU-derived soft label: clamp(2*IoU - 0.5, 0, 1)."""
    return float(np.clip(2.0 * iou - 0.5, 0.0, 1.0))


def refinement_loss(conf_logit, residual, proposal, gt, iou, alpha=2.0,
                    positive_iou=POSITIVE_IOU):
    """Confidence BCE plus alpha-weighted regression for positives.

    The regression term compares the predicted residual against the
    encoded ground-truth residual and is active only when the proposal
    matches its ground truth at IoU >= positive_iou. Returns the scalar
    loss tensor and a float breakdown for telemetry.
    """
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    target = confidence_target(iou)
    loss = T.bce_with_logits(conf_logit, np.array([[target]]))
    breakdown = {"conf": float(loss.data), "reg": 0.0}
    if iou >= positive_iou:
        if gt is None:
            raise ValueError("positive proposal without ground truth")
        enc = encode_box(gt, proposal)
        reg = T.smooth_l1(residual, enc[None, :])
        loss = T.add(loss, T.mul(reg, alpha))
        breakdown["reg"] = float(reg.data)
    return loss, breakdown
