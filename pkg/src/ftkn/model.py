"""The full refinement network: embeddings, both branches, decoder, heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DetectionHead, DualDecoder
from .fusion import FusionSchedule, FusionStage, MSPCondenser, plan_schedule
from .geometry import cylindrical_sample, geometry_embed, motion_embed
from .nn import tensor as T
from .nn.layers import MLP, Module
from .scaling import AdaptiveScalingLayer, ssp_condense
from .sequence import TokenSequence

EXTRA_CHANNELS = 1  # per-point intensity

GEO_FEATURES = 27 + EXTRA_CHANNELS          # offsets to 9 keypoints + extras
MOTION_FEATURES = GEO_FEATURES + 1          # + time delta


@dataclass
class SSPOut:
    """Current-frame branch output for one proposal."""

    seq: TokenSequence        # K focal tokens (f_s)
    sample: object            # the oversampled PointSet
    positions: np.ndarray     # rows of `sample` that survived condensation
    results: list


@dataclass
class ProposalForward:
    f_s: TokenSequence
    f_m: TokenSequence
    q_s: object
    q_m: object
    conf_logit: object
    residual: object
    ssp: SSPOut
    msp_results: list
    trace: list
    aux_conf: object = None
    aux_residual: object = None


def _schedule_from_config(cfg):
    fus = cfg.fusion
    if fus.schedule:
        stages = [FusionStage(float(r), int(g), 0) for r, g in fus.schedule]
        n = fus.frames
        fixed = []
        for st in stages:
            fixed.append(FusionStage(st.keep_ratio, st.group_count,
                                     n // st.group_count))
            n = st.group_count
        return FusionSchedule(fixed, cfg.fusion_k_out(), fus.strategy)
    return plan_schedule(fus.frames, fus.groups, fus.beta2,
                         cfg.fusion_k_out(), fus.strategy)


class FTKNModel(Module):
    """Focal-token refinement model.

    Ablation toggles change the architecture for a whole run: the
    current-frame decoder layer, the temporal decoder layer, intra-group
    fusion, and the motion embedding can each be switched off.
    """

    def __init__(self, cfg, rng, *, use_ssp_decoder=True, use_msp_decoder=True,
                 use_igf=True, use_motion=True):
        dim, heads = cfg.model.dim, cfg.model.heads
        scorer = cfg.scaling.scorer
        self.cfg = cfg
        self.use_ssp_decoder = use_ssp_decoder
        self.use_msp_decoder = use_msp_decoder
        self.use_motion = use_motion
        self.geo_mlp = MLP(GEO_FEATURES, dim, dim, rng, "geo", skip=True)
        # history frames get their own geometry weights: their offset
        # statistics (stale boxes, motion smear) would otherwise drag
        # the current-frame embedding while it learns
        self.geo_mlp_hist = MLP(GEO_FEATURES, dim, dim, rng, "geo_hist",
                                skip=True)
        self.motion_mlp = MLP(MOTION_FEATURES, dim, dim, rng, "motion",
                              skip=True)
        self.ssp_layers = [
            AdaptiveScalingLayer(dim, heads, scorer, rng, "ssp.layer%d" % i)
            for i in range(cfg.scaling.ssp_layers)
        ]
        self.schedule = _schedule_from_config(cfg)
        self.msp = MSPCondenser(dim, heads, self.schedule, scorer, rng,
                                "msp", use_igf=use_igf)
        self.decoder = DualDecoder(dim, heads, rng, "decoder")
        self.head_m = DetectionHead(dim, rng, "head_m")
        self.head_s = DetectionHead(dim, rng, "head_s")

    # -- branches -------------------------------------------------------

    def run_ssp(self, cloud, box, frame_index, rng, *, training=False,
                temperature=1.0):
        """Sample, embed and condense the current frame for one proposal."""
        sample = cylindrical_sample(cloud, box, self.cfg.sample_budget(), rng)
        seq = geometry_embed(sample, box, self.geo_mlp, frame_index)
        focal, _, results = ssp_condense(
            seq, self.ssp_layers, self.cfg.focal_k(), self.cfg.scaling.beta1,
            training=training, rng=rng, temperature=temperature)
        positions = results[0].kept
        for res in results[1:]:
            positions = positions[res.kept]
        return SSPOut(focal, sample, positions, results)

    def embed_history(self, points, box_then, box_now, frame_index):
        """f = g + m for one historical frame's sampled points."""
        g = geometry_embed(points, box_then, self.geo_mlp_hist, frame_index)
        if not self.use_motion:
            return g
        m = motion_embed(points, box_now, self.motion_mlp, frame_index)
        return TokenSequence(T.add(g.features, m.features), g.point_ids,
                             frame_index, frame_ids=g.frame_ids.copy())

    def run_msp(self, trajectory, history_points, rng, *, training=False,
                temperature=1.0):
        """Fuse the T per-frame sequences into one focal sequence."""
        seqs = []
        now = trajectory.current
        for box_t, frame_t, pts in zip(
                trajectory.boxes, trajectory.frame_indices, history_points):
            seqs.append(self.embed_history(pts, box_t, now, frame_t))
        return self.msp(seqs, training=training, rng=rng,
                        temperature=temperature)

    # -- heads ----------------------------------------------------------

    def decode(self, f_s, f_m, *, training=False):
        """Dual decoding plus detection heads.

        Returns (conf_logit, residual, q_s, q_m, aux_conf, aux_residual);
        the auxiliary head on q_s exists only in training mode.
        """
        f_s_in = f_s if self.use_ssp_decoder else None
        if self.use_msp_decoder:
            q_s, q_m = self.decoder(f_s_in, f_m)
        else:
            q_s = self.decoder.first_layer(f_s_in)
            q_m = q_s
        conf, residual = self.head_m(q_m)
        aux_conf = aux_res = None
        if training:
            aux_conf, aux_res = self.head_s(q_s)
        return conf, residual, q_s, q_m, aux_conf, aux_res

    def forward_proposal(self, cloud, proposal, trajectory, history_points,
                         frame_index, rng, *, training=False, temperature=1.0,
                         ssp_out=None):
        """End-to-end forward for one proposal.

        `ssp_out` lets the caller reuse a branch computed earlier in the
        frame (the storage pass shares it).
        """
        if ssp_out is None:
            ssp_out = self.run_ssp(cloud, proposal, frame_index, rng,
                                   training=training, temperature=temperature)
        f_m, trace, msp_results = self.run_msp(
            trajectory, history_points, rng,
            training=training, temperature=temperature)
        conf, residual, q_s, q_m, aux_conf, aux_res = self.decode(
            ssp_out.seq, f_m, training=training)
        return ProposalForward(
            f_s=ssp_out.seq, f_m=f_m, q_s=q_s, q_m=q_m,
            conf_logit=conf, residual=residual, ssp=ssp_out,
            msp_results=msp_results, trace=trace,
            aux_conf=aux_conf, aux_residual=aux_res)
