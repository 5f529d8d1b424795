"""Actionness grouping, proposal labeling, and 1:6:1 mini-batch sampling."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .timeline import AugmentedProposal, TemporalInterval, tiou

DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


class ProposalKind(str, enum.Enum):
    POSITIVE = "positive"
    CONFUSING = "confusing"
    BACKGROUND = "background"


class CompositionError(ValueError):
    """The proposal pool cannot fill a mini-batch at the required ratio."""


@dataclass(frozen=True)
class GroundTruth:
    interval: TemporalInterval
    class_id: int


@dataclass(frozen=True)
class LabeledProposal:
    proposal: AugmentedProposal
    kind: ProposalKind
    matched_class: Optional[int]
    best_tiou: float
    matched_gt: Optional[TemporalInterval] = None
    video_id: Optional[str] = None


@dataclass
class MiniBatch:
    members: List[LabeledProposal]

    @property
    def counts(self) -> Tuple[int, int, int]:
        n = {k: 0 for k in ProposalKind}
        for m in self.members:
            n[m.kind] += 1
        return n[ProposalKind.POSITIVE], n[ProposalKind.CONFUSING], n[ProposalKind.BACKGROUND]


def actionness_grouping(scores: Sequence[float], thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
                        merge_gap: int = 1, unit_length: int = 1) -> List[TemporalInterval]:
    """Group per-unit actionness into candidate intervals (in frames).

    Runs are found independently for every threshold, then pooled and
    deduplicated. Output is sorted by (start, end).
    """
    scores = np.asarray(scores, dtype=np.float64)
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("at least one threshold is required")
    if np.any((scores < 0) | (scores > 1)):
        raise ValueError("actionness scores must lie in [0, 1]")
    spans = set()
    for thr in thresholds:
        if not 0.0 < thr < 1.0:
            raise ValueError(f"threshold {thr} outside (0, 1)")
        for a, b in kernels.threshold_runs(scores, float(thr), int(merge_gap)):
            spans.add((int(a), int(b)))
    return [TemporalInterval(a * unit_length + 1, (b + 1) * unit_length)
            for a, b in sorted(spans)]


def label_proposals(proposals: Sequence[AugmentedProposal], ground_truths: Sequence[GroundTruth],
                    pos_thr: float = 0.7, bg_ceiling: float = 0.1,
                    video_id: Optional[str] = None) -> List[LabeledProposal]:
    if not 0.0 <= bg_ceiling < pos_thr <= 1.0:
        raise ValueError("need 0 <= bg_ceiling < pos_thr <= 1")
    out = []
    for p in proposals:
        best, best_gt = 0.0, None
        for gt in ground_truths:
            ov = tiou(p.core, gt.interval)
            if ov > best:
                best, best_gt = ov, gt
        if best >= pos_thr:
            kind = ProposalKind.POSITIVE
        elif best <= bg_ceiling:
            kind = ProposalKind.BACKGROUND
        else:
            kind = ProposalKind.CONFUSING
        matched = best_gt if kind is not ProposalKind.BACKGROUND else None
        out.append(LabeledProposal(
            proposal=p, kind=kind,
            matched_class=matched.class_id if matched else None,
            best_tiou=best,
            matched_gt=matched.interval if matched else None,
            video_id=video_id))
    return out


def batch_counts(batch_size: int) -> Tuple[int, int, int]:
    if batch_size <= 0 or batch_size % 8:
        raise ValueError(f"batch_size must be a positive multiple of 8, got {batch_size}")
    unit = batch_size // 8
    return unit, 6 * unit, unit


def sample_minibatch(pool: Sequence[LabeledProposal], batch_size: int,
                     rng: np.random.Generator) -> MiniBatch:
    """Draw a batch at exact 1:6:1 positive/confusing/background counts.

    Kinds with enough members are drawn without replacement; scarce kinds are
    drawn with replacement so the ratio never bends.
    """
    wanted = dict(zip(ProposalKind, batch_counts(batch_size)))
    by_kind = {k: [m for m in pool if m.kind is k] for k in ProposalKind}
    missing = [k.value for k in ProposalKind if not by_kind[k]]
    if missing:
        raise CompositionError(f"proposal pool has no {', '.join(missing)} proposals")
    members: List[LabeledProposal] = []
    for kind in ProposalKind:
        cands = by_kind[kind]
        replace = len(cands) < wanted[kind]
        idx = rng.choice(len(cands), size=wanted[kind], replace=replace)
        members.extend(cands[i] for i in idx)
    return MiniBatch(members)
