"""Grouped hierarchical fusion of per-frame token sequences.

T per-frame sequences are condensed into one: each stage scales every
sequence down, splits the sequences into groups, and merges each group
into a single longer sequence (intra-group fusion), until one sequence
remains; a final scaling lands on the output budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import tensor as T
from .nn.layers import ConfigError, LayerNorm, Linear, Module
from .nn.tensor import ShapeError
from .scaling import AdaptiveScalingLayer, ScaleResult
from .sequence import TokenSequence

STRATEGIES = ("equal_stride", "contiguous", "anchored")


@dataclass
class GroupPlan:
    """How T sequences split into groups. Indices are 1-based."""

    count: int
    group_count: int
    strategy: str
    groups: list

    def zero_based(self):
        return [[i - 1 for i in g] for g in self.groups]


def group_split(count, group_count, strategy="equal_stride"):
    """Assign sequence indices 1..count to groups.

    equal_stride spreads consecutive frames across groups (group g gets
    g, g+G, g+2G, ...), contiguous slices them in order, anchored builds
    overlapping groups that all contain sequence 1 with stride g per
    group. The first two partition; anchored covers with repetition.
    """
    if strategy not in STRATEGIES:
        raise ConfigError("unknown grouping strategy %r" % (strategy,))
    if count % group_count != 0:
        raise ConfigError(
            "%d sequences do not split into %d equal groups" % (count, group_count))
    per = count // group_count
    if strategy == "equal_stride":
        groups = [[g + j * group_count for j in range(per)]
                  for g in range(1, group_count + 1)]
    elif strategy == "contiguous":
        groups = [list(range(1 + g * per, 1 + (g + 1) * per))
                  for g in range(group_count)]
    else:
        groups = [[1 + j * g for j in range(per)]
                  for g in range(1, group_count + 1)]
        if any(i > count for grp in groups for i in grp):
            raise ConfigError("anchored stride exceeds sequence count")
    return GroupPlan(count, group_count, strategy, groups)


class IGFBlock(Module):
    """Merge a group of equally long sequences into one flat sequence.

    Per sequence: channel max-pool to one summary vector. All summaries
    are concatenated and mixed by a projection, split back into one
    summary token per sequence, broadcast to that sequence's tokens,
    concatenated on the channel axis, compressed back to D by a shared
    pointwise projection, added residually, and layer-normed. The group
    then flattens to (group_size * K) rows in sequence order.
    """

    def __init__(self, dim, group_size, rng, name="igf"):
        self.dim = dim
        self.group_size = group_size
        self.proj = Linear(group_size * dim, group_size * dim, rng, name + ".proj")
        self.compress = Linear(2 * dim, dim, rng, name + ".compress")
        self.norm = LayerNorm(dim, name + ".ln")

    def __call__(self, seqs):
        if len(seqs) != self.group_size:
            raise ShapeError(
                "igf built for groups of %d, got %d" % (self.group_size, len(seqs)))
        k = len(seqs[0])
        if any(len(s) != k for s in seqs):
            raise ShapeError("ragged group: sequence lengths differ")
        if any(s.features.data.shape[1] != self.dim for s in seqs):
            raise ShapeError("sequence width differs from block dim")

        pooled = [T.max_over_rows(s.features) for s in seqs]
        mixed = self.proj(T.concat_cols(pooled))
        summaries = T.reshape(mixed, (self.group_size, self.dim))
        merged = []
        for s_idx, s in enumerate(seqs):
            summary = T.gather_rows(summaries, np.full(len(s), s_idx, dtype=np.int64))
            fused = self.compress(T.concat_cols([s.features, summary]))
            merged.append(self.norm(T.add(s.features, fused)))
        feats = T.concat_rows(merged)
        ids = np.concatenate([s.point_ids for s in seqs])
        frames = np.concatenate([s.frame_ids for s in seqs])
        return TokenSequence(feats, ids, seqs[0].frame_index, frame_ids=frames)


def concat_merge(seqs):
    """Ablation stand-in for IGF: plain row concatenation, no mixing."""
    feats = T.concat_rows([s.features for s in seqs])
    ids = np.concatenate([s.point_ids for s in seqs])
    frames = np.concatenate([s.frame_ids for s in seqs])
    return TokenSequence(feats, ids, seqs[0].frame_index, frame_ids=frames)


@dataclass
class FusionStage:
    keep_ratio: float
    group_count: int
    group_size: int


@dataclass
class FusionSchedule:
    stages: list
    final_length: int
    strategy: str = "equal_stride"


def plan_schedule(frame_count, group_count, keep_ratio, final_length,
                  strategy="equal_stride"):
    """Default alternating scale/merge plan for `frame_count` sequences.

    While more than `group_count` sequences remain they are split into
    `group_count` groups; once exactly `group_count` (or fewer) remain
    they merge into a single group. A final scaling stage (not part of
    `stages`) brings the lone sequence to `final_length`.
    """
    if frame_count < 1:
        raise ConfigError("need at least one frame")
    stages = []
    n = frame_count
    while n > 1:
        g = group_count if n > group_count else 1
        if n % g != 0:
            raise ConfigError(
                "cannot divide %d sequences into %d groups" % (n, g))
        stages.append(FusionStage(keep_ratio, g, n // g))
        n = g
    return FusionSchedule(stages, final_length, strategy)


def simulate_schedule(frame_count, seq_length, schedule):
    """Arithmetic-only trace of (sequence count, length) after each step.

    Starts after the first scaling; entries alternate scale/merge and end
    with the final scaling, e.g. the 16-frame default gives
    [(16,24), (4,96), (4,48), (1,192), (1,48)].
    """
    trace = []
    n, length = frame_count, seq_length
    for st in schedule.stages:
        length = math.ceil(st.keep_ratio * length)
        trace.append((n, length))
        n = st.group_count
        length = st.group_size * length
        trace.append((n, length))
    if n != 1:
        raise ConfigError("schedule leaves %d sequences, expected 1" % n)
    trace.append((1, schedule.final_length))
    return trace


class MSPCondenser(Module):
    """Trainable condensation of T sequences into one focal sequence.

    Scaling-layer and fusion-block parameters are shared across the
    sequences/groups within a stage and distinct between stages.
    """

    def __init__(self, dim, heads, schedule, scorer="adaptive", rng=None,
                 name="msp", use_igf=True):
        self.schedule = schedule
        self.use_igf = use_igf
        self.scales = []
        self.igfs = []
        for i, st in enumerate(schedule.stages):
            self.scales.append(AdaptiveScalingLayer(
                dim, heads, scorer, rng, "%s.stage%d.scale" % (name, i)))
            self.igfs.append(IGFBlock(
                dim, st.group_size, rng, "%s.stage%d.igf" % (name, i)))
        self.final_scale = AdaptiveScalingLayer(
            dim, heads, scorer, rng, name + ".final.scale")

    def __call__(self, seqs, *, training=False, rng=None, temperature=1.0):
        """Returns (fused sequence, trace, per-layer scale results)."""
        trace = []
        results = []
        for st, scale, igf in zip(self.schedule.stages, self.scales, self.igfs):
            length = len(seqs[0])
            target = max(1, math.ceil(st.keep_ratio * length))
            scaled = []
            for s in seqs:
                if s.valid_mask.any():
                    res = scale(s, target, training=training, rng=rng,
                                temperature=temperature)
                else:
                    # drop probes can empty a whole sequence: nothing to
                    # rank, keep the leading rows
                    kept = np.arange(target)
                    res = ScaleResult(s.select(kept), kept, np.zeros(len(s)))
                results.append(res)
                scaled.append(res.seq)
            trace.append((len(scaled), target))
            plan = group_split(len(scaled), st.group_count, self.schedule.strategy)
            if self.use_igf:
                seqs = [igf([scaled[i] for i in grp]) for grp in plan.zero_based()]
            else:
                seqs = [concat_merge([scaled[i] for i in grp])
                        for grp in plan.zero_based()]
            trace.append((len(seqs), len(seqs[0])))
        if len(seqs) != 1:
            raise ConfigError("schedule left %d sequences" % len(seqs))
        res = self.final_scale(seqs[0], self.schedule.final_length,
                               training=training, rng=rng, temperature=temperature)
        results.append(res)
        trace.append((1, len(res.seq)))
        return res.seq, trace, results


def msp_condense(seqs, condenser, **kw):
    """Functional entry point over a prepared MSPCondenser."""
    return condenser(seqs, **kw)
