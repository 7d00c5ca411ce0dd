"""Attention-driven token compression: score, select, gather, update.

One scaling layer runs full self-attention, ranks tokens by how much
attention they receive as keys, keeps the best N_s, and finishes the
transformer block only for the surviving rows. Stacking layers condenses
a long per-object point sequence into a short focal one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import rot_z
from .nn import tensor as T
from .nn.layers import (
    ConfigError,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    key_mask_bias,
)
from .nn.tensor import Tensor
from .sequence import PAD_ID, TokenSequence

SCORERS = ("adaptive", "supervised", "gumbel_mask", "random")


class EmptyRegionError(RuntimeError):
    """Raised when a sequence contains no real tokens to attend over."""


@dataclass
class ScalingConfig:
    heads: int = 4
    keep_ratio: float = 0.5
    scorer: str = "adaptive"
    layers: int = 2
    eta: float = 0.2
    temperature: float = 1.0

    def __post_init__(self):
        if self.scorer not in SCORERS:
            raise ConfigError("unknown scorer %r" % (self.scorer,))
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ConfigError("keep_ratio must be in (0, 1]")
        if self.heads < 1 or self.layers < 1:
            raise ConfigError("heads and layers must be positive")
        if not (0.0 < self.eta < 1.0):
            raise ConfigError("eta must be in (0, 1)")
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be positive")


def token_scores(maps, valid_mask):
    """Contribution score per token from H attention maps.

    S_i = sigmoid(sum over queries j of max over heads h of A_h[j, i]):
    the total attention token i receives as a key, squashed to (0,1).
    Padded tokens get score exactly 0, below any sigmoid output, so they
    rank behind every real token.
    """
    stacked = np.stack([getattr(m, "data", m) for m in maps])
    received = np.max(stacked, axis=0).sum(axis=0)
    s = 1.0 / (1.0 + np.exp(-received))
    return np.where(np.asarray(valid_mask, dtype=bool), s, 0.0)


def select_topk(scores, count):
    """Indices of the `count` best scores, ascending, ties to lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if count > scores.shape[0]:
        raise ConfigError(
            "cannot keep %d of %d tokens" % (count, scores.shape[0]))
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:count])


def random_select(seq, count, seed):
    """Uniform without-replacement choice among real tokens, ascending.

    Padding indices fill the tail only when fewer than `count` real
    tokens exist. `seed` may be an int or a numpy Generator.
    """
    if count > len(seq):
        raise ConfigError("cannot keep %d of %d tokens" % (count, len(seq)))
    rng = np.random.default_rng(seed)
    valid_idx = np.flatnonzero(seq.valid_mask)
    if count <= valid_idx.shape[0]:
        picked = rng.choice(valid_idx, size=count, replace=False)
    else:
        pad_idx = np.flatnonzero(~seq.valid_mask)
        picked = np.concatenate([valid_idx, pad_idx[: count - valid_idx.shape[0]]])
    return np.sort(picked)


def containment_scale(point, box):
    """Minimal uniform scale of `box` needed to contain `point`.

    Computed in the box's canonical frame: max over the three axes of
    |coordinate| / half-extent. 0 means the point sits at the center,
    1 on the surface, >1 outside.
    """
    local = rot_z(-box.yaw) @ (np.asarray(point, dtype=np.float64) - box.center)
    return float(np.max(np.abs(local) / (box.size / 2.0)))


def supervised_score(point, gt, eta=0.2):
    """Point-box supervision target in [0,1].

    1 for points comfortably inside the box (a < 1-eta), 0 comfortably
    outside (a > 1+eta), linear ramp between.
    """
    if not (0.0 < eta < 1.0):
        raise ConfigError("eta must be in (0, 1)")
    return _ramp(containment_scale(point, gt), eta)


def supervised_targets(coords, gt, eta=0.2):
    """Vectorized supervision targets for (N, 3) coordinates."""
    if not (0.0 < eta < 1.0):
        raise ConfigError("eta must be in (0, 1)")
    local = (np.asarray(coords, dtype=np.float64) - gt.center) @ rot_z(-gt.yaw).T
    a = np.max(np.abs(local) / (gt.size / 2.0), axis=1)
    return _ramp(a, eta)


def _ramp(a, eta):
    return np.clip((1.0 + eta - a) / (2.0 * eta), 0.0, 1.0)


@dataclass
class GumbelGates:
    """Keep decisions from the stochastic gate head."""

    kept: np.ndarray
    scores: np.ndarray
    gate: object = None        # (1, N) straight-through Tensor, training only
    head_logits: object = None # (N, 1) Tensor, for gradient flow


def gumbel_mask_scores(seq, score_head, temperature, training, keep, rng=None):
    """Stochastic keep decisions via perturbed gate logits.

    Training: Gumbel noise is added to the per-token logits; the top
    `keep` perturbed tokens are kept, and a straight-through gate (hard
    0/1 forward, softmax((logits+noise)/temperature) backward) masks the
    dropped keys out of the attention map. Inference: deterministic
    top-k on the raw logits, no noise, no gate.
    """
    if temperature <= 0.0:
        raise ConfigError("temperature must be positive")
    logits_t = score_head(seq.features)
    logits = logits_t.data[:, 0]
    valid = seq.valid_mask
    if training:
        if rng is None:
            raise ConfigError("training-mode gates need an rng")
        noise = rng.gumbel(size=logits.shape)
        perturbed = np.where(valid, logits + noise, -np.inf)
    else:
        noise = None
        perturbed = np.where(valid, logits, -np.inf)
    order = np.argsort(-perturbed, kind="stable")
    kept = np.sort(order[:keep])
    scores = np.where(valid, 1.0 / (1.0 + np.exp(-logits)), 0.0)
    if not training:
        return GumbelGates(kept=kept, scores=scores, head_logits=logits_t)

    hard = np.zeros((1, len(seq)))
    hard[0, kept] = 1.0
    bias = key_mask_bias(valid)
    row = T.transpose(logits_t)
    scaled = T.add(T.mul(row, Tensor(np.array(1.0 / temperature))),
                   T.add(Tensor(noise[None, :] / temperature), bias))
    soft = T.softmax_rows(scaled)
    gate = T.straight_through(soft, hard)
    return GumbelGates(kept=kept, scores=scores, gate=gate, head_logits=logits_t)


@dataclass
class ScaleResult:
    seq: TokenSequence
    kept: np.ndarray
    scores: np.ndarray
    head_logits: object = None  # Tensor when the layer has a score head


class AdaptiveScalingLayer(Module):
    """One compression block: attention, rank, keep N_s, finish the block.

    The update path after selection is a standard transformer block
    restricted to the surviving rows: gathered attention output plus the
    gathered input as residual, layer norm, feed-forward, layer norm.
    Because attention rows are independent, the output rows match the
    corresponding rows of the uncompressed block exactly.
    """

    def __init__(self, dim, heads, scorer="adaptive", rng=None, name="scale"):
        if scorer not in SCORERS:
            raise ConfigError("unknown scorer %r" % (scorer,))
        self.dim = dim
        self.scorer = scorer
        self.attn = MultiHeadAttention(dim, heads, rng=rng, name=name + ".attn")
        self.norm1 = LayerNorm(dim, name=name + ".ln1")
        self.ffn = FeedForward(dim, rng=rng, name=name + ".ffn")
        self.norm2 = LayerNorm(dim, name=name + ".ln2")
        if scorer in ("supervised", "gumbel_mask"):
            self.score_head = Linear(dim, 1, rng=rng, name=name + ".score")

    def __call__(self, seq, keep, *, training=False, rng=None, temperature=1.0):
        n = len(seq)
        if keep > n:
            raise ConfigError("cannot keep %d of %d tokens" % (keep, n))
        valid = seq.valid_mask
        if not valid.any():
            raise EmptyRegionError("all tokens padded")
        x = seq.features
        ks, vs = self.attn.head_values(x, x)
        head_logits = None

        if self.scorer == "adaptive":
            maps = self.attn.attention_maps(x, ks, key_mask=valid)
            scores = token_scores(maps, valid)
            kept = select_topk(scores, keep)
        elif self.scorer == "supervised":
            head_logits = self.score_head(x)
            scores = np.where(
                valid, 1.0 / (1.0 + np.exp(-head_logits.data[:, 0])), 0.0)
            kept = select_topk(scores, keep)
            maps = self.attn.attention_maps(x, ks, key_mask=valid)
        elif self.scorer == "gumbel_mask":
            gg = gumbel_mask_scores(
                seq, self.score_head, temperature, training, keep, rng=rng)
            kept, scores, head_logits = gg.kept, gg.scores, gg.head_logits
            if gg.gate is not None:
                maps = self.attn.attention_maps(x, ks, key_gate=gg.gate)
            else:
                maps = self.attn.attention_maps(x, ks, key_mask=valid)
        else:  # random
            kept = random_select(seq, keep, rng)
            scores = np.where(valid, 1.0 / n, 0.0)
            maps = self.attn.attention_maps(x, ks, key_mask=valid)

        picked = [T.gather_rows(m, kept) for m in maps]
        ctx = self.attn.combine(picked, vs)
        h = self.norm1(T.add(T.gather_rows(x, kept), ctx))
        out = self.norm2(T.add(h, self.ffn(h)))
        out_seq = TokenSequence(
            out, seq.point_ids[kept], seq.frame_index, seq.frame_ids[kept])
        return ScaleResult(out_seq, kept, scores, head_logits)

    def full_block(self, seq):
        """Uncompressed reference path: the same block with every row kept."""
        res = self(seq, len(seq))
        return res.seq


def length_schedule(start, keep_ratio, layers, final=None):
    """Per-layer target lengths for a condensation stack.

    Layer l targets ceil(keep_ratio**l * start) so the schedule depends
    only on the original length. When `final` is given the last layer is
    pinned to it and intermediates never undershoot it.
    """
    lengths = [start]
    for l in range(1, layers + 1):
        t = int(np.ceil(keep_ratio ** l * start))
        t = max(t, 1)
        if final is not None:
            t = max(t, final)
        lengths.append(t)
    if final is not None:
        lengths[-1] = final
    return lengths


def ssp_condense(seq, layers, final_count, keep_ratio,
                 *, training=False, rng=None, temperature=1.0):
    """Condense one frame's sampled tokens down to the focal budget.

    Applies each scaling layer in turn following `length_schedule`; the
    last layer lands exactly on `final_count` so the focal store sees a
    fixed shape. Returns the condensed sequence, the surviving point
    ids, and the per-layer results.
    """
    targets = length_schedule(len(seq), keep_ratio, len(layers), final_count)[1:]
    results = []
    cur = seq
    for layer, target in zip(layers, targets):
        res = layer(cur, target, training=training, rng=rng,
                    temperature=temperature)
        results.append(res)
        cur = res.seq
    return cur, cur.point_ids.copy(), results
