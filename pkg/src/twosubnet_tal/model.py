"""Full two-subnet model and proposal sampling glue shared by training and inference."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .proposals import (DEFAULT_THRESHOLDS, GroundTruth, LabeledProposal, ProposalKind,
                        actionness_grouping, label_proposals)
from .subnet1 import BackboneConfig, SubnetOne, build_feature_maps
from .subnet2 import CaptureConfig, HeadOutputs, SubnetTwo, SubnetTwoConfig
from .timeline import AugmentedProposal, TemporalInterval, augment_proposal, encode_offsets


@dataclass
class ProposalConfig:
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    merge_gap: int = 1
    pos_thr: float = 0.7
    bg_ceiling: float = 0.1
    jitter_per_gt: int = 8
    jitter_scale: float = 0.25

    def __post_init__(self):
        self.thresholds = tuple(self.thresholds)


class TwoSubnetModel(nn.Module):
    def __init__(self, backbone: BackboneConfig, subnet2: SubnetTwoConfig, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.subnet1 = SubnetOne(backbone, num_classes)
        self.subnet2 = SubnetTwo(subnet2, backbone.feature_dim, num_classes)

    @property
    def min_units(self) -> int:
        return max(3, 3 * self.subnet2.cfg.alpha)

    def proposal_maps(self, unit_feats: Dict[str, Tuple[torch.Tensor, torch.Tensor]],
                      items: Sequence[Tuple[str, AugmentedProposal]]):
        maps = [build_feature_maps(p, *unit_feats[vid]) for vid, p in items]
        return maps

    def forward(self, maps, with_aux: bool = True, with_main: bool = True):
        main = aux = None
        if with_main:
            main = self.subnet2([m.V_s for m in maps], [m.V_t for m in maps])
        if with_aux:
            aux = HeadOutputs(*self.subnet1.aux(maps))
        return main, aux


def feasible(p: AugmentedProposal, min_units: int) -> bool:
    return p.num_units >= min_units


def candidate_proposals(video, pcfg: ProposalConfig) -> List[TemporalInterval]:
    return actionness_grouping(video.actionness, pcfg.thresholds, pcfg.merge_gap,
                               video.unit_length)


def jittered_ground_truths(video, pcfg: ProposalConfig, rng: np.random.Generator):
    """Location/length jitter around each instance, snapped to the video."""
    out = []
    for g in video.instances:
        d = g.interval.duration
        for _ in range(pcfg.jitter_per_gt):
            shift = rng.normal(0.0, pcfg.jitter_scale) * d
            scale = float(np.exp(rng.normal(0.0, pcfg.jitter_scale)))
            length = max(1, int(round(d * scale)))
            start = int(round(g.interval.center + shift - (length - 1) / 2))
            start = min(max(1, start), video.frames - length + 1)
            out.append(TemporalInterval(start, start + length - 1))
    return out


def build_pool(videos, pcfg: ProposalConfig, min_units: int, rng: Optional[np.random.Generator]
               ) -> List[LabeledProposal]:
    """Labeled, feasible training proposals over ``videos``.

    Grouped proposals come first; with ``rng`` given, jittered copies of every
    ground-truth instance (and the instance itself) are added.
    """
    pool = []
    for v in videos:
        cands = set(candidate_proposals(v, pcfg))
        if rng is not None:
            cands.update(g.interval for g in v.instances)
            cands.update(jittered_ground_truths(v, pcfg, rng))
        aug = [augment_proposal(c, v.frames, v.unit_length) for c in sorted(cands)]
        aug = [a for a in aug if feasible(a, min_units)]
        pool.extend(label_proposals(aug, v.instances, pcfg.pos_thr, pcfg.bg_ceiling, v.video_id))
    return pool


def targets_for(members: Sequence[LabeledProposal]):
    """Tensors consumed by ``losses.principal_loss`` for a list of labeled proposals."""
    from .losses import BatchTargets
    n = len(members)
    action = torch.full((n,), -1, dtype=torch.long)
    tiou_class = torch.full((n,), -1, dtype=torch.long)
    tiou_target = torch.zeros(n)
    offsets = torch.zeros(n, 2, dtype=torch.float64)
    reg_mask = torch.zeros(n, dtype=torch.bool)
    for i, m in enumerate(members):
        if m.kind is ProposalKind.POSITIVE:
            action[i] = m.matched_class + 1
            tiou_class[i] = m.matched_class
            tiou_target[i] = 1.0
            off = encode_offsets(m.matched_gt, m.proposal.core)
            offsets[i, 0], offsets[i, 1] = off.d_loc, off.d_len
            reg_mask[i] = True
        elif m.kind is ProposalKind.CONFUSING:
            tiou_class[i] = m.matched_class
        else:
            action[i] = 0
    return BatchTargets(action, tiou_class, tiou_target, offsets, reg_mask)
