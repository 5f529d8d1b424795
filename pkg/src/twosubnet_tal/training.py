"""Three-step optimization of the two-subnet model.

step1: Subnet I with the auxiliary heads (the only heads it owns).
step2: Subnet I frozen; Subnet II trained from its random initialization.
step3: both fine-tuned on w1 * step1-loss + w2 * step2-loss.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .losses import BatchLossReport, LossWeights, principal_loss, sub_losses
from .model import ProposalConfig, TwoSubnetModel, build_pool, targets_for
from .proposals import sample_minibatch
from .subnet1 import BackboneConfig
from .subnet2 import CaptureConfig, SubnetTwoConfig

log = logging.getLogger(__name__)

PHASES = ("step1", "step2", "step3")


class DivergenceError(RuntimeError):
    def __init__(self, phase: str, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} in {phase} at iteration {iteration}")
        self.phase = phase
        self.iteration = iteration


@dataclass
class TrainConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    subnet2: SubnetTwoConfig = field(default_factory=lambda: SubnetTwoConfig(
        alpha=3, n=33, capture=CaptureConfig.compact()))
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    keep_fraction: float = 1 / 6
    tiou_mode: str = "softmax"
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr: Tuple[float, float, float] = (0.05, 0.05, 0.01)
    iterations: Tuple[int, int, int] = (150, 300, 100)
    step3_mix: Tuple[float, float] = (0.5, 0.5)
    aux_in_step3: bool = True
    nms_threshold: float = 0.2
    strict_matching: bool = True

    def __post_init__(self):
        self.lr = tuple(self.lr)
        self.iterations = tuple(self.iterations)
        self.step3_mix = tuple(self.step3_mix)
        if abs(sum(self.step3_mix) - 1.0) > 1e-12:
            raise ValueError(f"step-3 mix weights must sum to 1, got {self.step3_mix}")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["subnet2"] = self.subnet2.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["backbone"] = BackboneConfig(**obj["backbone"])
        obj["subnet2"] = SubnetTwoConfig.from_json(obj["subnet2"])
        obj["proposals"] = ProposalConfig(**obj["proposals"])
        obj["weights"] = LossWeights(**obj["weights"])
        return cls(**obj)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_model(cfg: TrainConfig, num_classes: int, dtype=torch.float32) -> TwoSubnetModel:
    torch.manual_seed(cfg.seed)
    return TwoSubnetModel(cfg.backbone, cfg.subnet2, num_classes).to(dtype)


class UnitFeatureSource:
    """Per-video unit features for a batch, through Subnet I when it has backbones."""

    def __init__(self, model: TwoSubnetModel, dataset, rng: Optional[np.random.Generator]):
        self.model = model
        self.dataset = dataset
        self.rng = rng
        self.dtype = next(model.parameters()).dtype

    def __call__(self, video_ids) -> Dict[str, tuple]:
        out = {}
        for vid in sorted(set(video_ids)):
            v = self.dataset.videos[vid]
            if self.model.subnet1.cfg.mode == "feature":
                out[vid] = v.unit_features(self.dtype)
            else:
                offsets = None
                if self.rng is not None:
                    offsets = self.rng.integers(0, v.unit_length, size=v.num_units)
                frames, flows = v.unit_inputs(offsets)
                out[vid] = self.model.subnet1.encode_units(frames.to(self.dtype),
                                                           flows.to(self.dtype))
        return out


def phase_loss(model, maps, targets, cfg: TrainConfig, phase: str) -> BatchLossReport:
    """Loss report of one phase.

    step1 scores only the auxiliary heads; step2 only the main heads; step3
    mixes the two phase losses with ``cfg.step3_mix``. Fields that a phase does
    not compute are NaN.
    """
    w = cfg.weights
    kw = dict(keep_fraction=cfg.keep_fraction, tiou_mode=cfg.tiou_mode)
    nan = float("nan")
    if phase == "step1":
        _, aux = model(maps, with_aux=True, with_main=False)
        sub = sub_losses(aux, targets, **kw)
        aux_val = sub.weighted(w)
        total = w.aux_weight * aux_val
        return BatchLossReport(nan, nan, nan, nan, float(aux_val.detach()), float(total.detach()), sub.selected,
                               [f"aux:{e}" for e in sub.empty], total, None, aux_val)
    with_aux = phase == "step3" and cfg.aux_in_step3
    main, aux = model(maps, with_aux=with_aux, with_main=True)
    rep = principal_loss(main, targets, w, aux_out=aux, **kw)
    if phase == "step2":
        rep.auxiliary = nan
        return rep
    w1, w2 = cfg.step3_mix
    if aux is None:
        total = rep.principal_tensor
        rep.auxiliary = nan
    else:
        total = w1 * w.aux_weight * rep.auxiliary_tensor + w2 * rep.principal_tensor
    rep.total, rep.total_tensor = float(total.detach()), total
    return rep


def _phase_params(model: TwoSubnetModel, phase: str):
    if phase == "step1":
        return list(model.subnet1.parameters())
    if phase == "step2":
        return list(model.subnet2.parameters())
    return list(model.parameters())


@dataclass
class TrainResult:
    model: TwoSubnetModel
    history: List[dict]
    config: TrainConfig


def run_three_step_training(dataset, cfg: TrainConfig, dtype=torch.float32,
                            phases=PHASES, on_record: Optional[Callable[[dict], None]] = None,
                            on_phase_end: Optional[Callable[[str, int, TwoSubnetModel], None]] = None,
                            model: Optional[TwoSubnetModel] = None) -> TrainResult:
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng([cfg.seed, 17])
    if model is None:
        model = build_model(cfg, dataset.num_classes, dtype)
    train_videos = dataset.split("train")
    pool = build_pool(train_videos, cfg.proposals, model.min_units, rng)
    log.info("training pool: %d proposals", len(pool))
    source = UnitFeatureSource(model, dataset, rng)
    history: List[dict] = []
    for phase, lr, iters in zip(PHASES, cfg.lr, cfg.iterations):
        if phase not in phases:
            continue
        params = _phase_params(model, phase)
        for p in model.parameters():
            p.requires_grad_(False)
        for p in params:
            p.requires_grad_(True)
        model.train()
        if phase == "step2":
            model.subnet1.eval()
        opt = torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        for it in range(iters):
            batch = sample_minibatch(pool, cfg.batch_size, rng)
            items = [(m.video_id, m.proposal) for m in batch.members]
            feats = source([vid for vid, _ in items])
            maps = model.proposal_maps(feats, items)
            targets = targets_for(batch.members)
            rep = phase_loss(model, maps, targets, cfg, phase)
            if not math.isfinite(rep.total):
                raise DivergenceError(phase, it, rep.total)
            opt.zero_grad()
            rep.total_tensor.backward()
            opt.step()
            rec = {"phase": phase, "iteration": it}
            for k, v in rep.as_record().items():
                rec[k] = v if math.isfinite(v) else None
            rec["total"] = rep.total
            history.append(rec)
            if on_record is not None:
                on_record(rec)
        for p in model.parameters():
            p.requires_grad_(True)
        if on_phase_end is not None:
            on_phase_end(phase, iters, model)
    model.eval()
    return TrainResult(model, history, cfg)
