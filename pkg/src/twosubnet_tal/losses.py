"""Multi-task objective: action softmax, hard-mined tIoU loss, smooth-L1 offsets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn.functional as F

from .subnet2 import HeadOutputs


@dataclass
class LossWeights:
    lambda_tiou: float = 1.0
    mu_reg: float = 1.0
    aux_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda_tiou", "mu_reg", "aux_weight"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class BatchTargets:
    """Per-sample supervision for one mini-batch.

    ``action`` holds the K+1-way label (0 = background, c+1 = class c) or -1 when
    the sample is not shown to the action classifier. ``tiou_class`` holds the
    matched class (or -1) for samples seen by the tIoU head and
    ``tiou_target`` the completeness target (1 positive, 0 confusing) used by
    the sigmoid variant. ``offsets`` is N x 2 and ``reg_mask`` marks positives.
    """

    action: torch.Tensor
    tiou_class: torch.Tensor
    tiou_target: torch.Tensor
    offsets: torch.Tensor
    reg_mask: torch.Tensor


@dataclass
class SubLosses:
    L_als: torch.Tensor
    L_tIoU: torch.Tensor
    L_reg: torch.Tensor
    selected: List[int]
    empty: List[str] = field(default_factory=list)

    def weighted(self, w: LossWeights) -> torch.Tensor:
        return self.L_als + w.lambda_tiou * self.L_tIoU + w.mu_reg * self.L_reg


@dataclass
class BatchLossReport:
    L_als: float
    L_tIoU: float
    L_reg: float
    principal: float
    auxiliary: float
    total: float
    selected_hard_indices: List[int]
    flags: List[str] = field(default_factory=list)
    total_tensor: Optional[torch.Tensor] = None
    principal_tensor: Optional[torch.Tensor] = None
    auxiliary_tensor: Optional[torch.Tensor] = None

    def as_record(self) -> dict:
        return {"L_als": self.L_als, "L_tIoU": self.L_tIoU, "L_reg": self.L_reg,
                "principal": self.principal, "auxiliary": self.auxiliary}


def _check_one_hot(labels: torch.Tensor):
    ok = ((labels == 0) | (labels == 1)).all() and (labels.sum(dim=1) == 1).all()
    if not bool(ok):
        raise ValueError("label rows must be one-hot")


def action_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log softmax probability of the labeled class."""
    _check_one_hot(labels)
    return -(F.log_softmax(logits, dim=1) * labels).sum(dim=1).mean()


def keep_count(n: int, keep_fraction: float) -> int:
    # round first so 12 * (1/6) counts as exactly 2
    return max(1, math.ceil(round(n * keep_fraction, 9)))


def hard_example_indices(per_sample: torch.Tensor, keep_fraction: float) -> List[int]:
    """Indices of the largest losses; ties go to the lower index."""
    k = keep_count(per_sample.shape[0], keep_fraction)
    vals = per_sample.detach().cpu().tolist()
    order = sorted(range(len(vals)), key=lambda i: (-vals[i], i))
    return sorted(order[:k])


def tiou_loss_with_ohem(logits: torch.Tensor, labels: torch.Tensor, keep_fraction: float = 1 / 6,
                        mode: str = "softmax", targets: Optional[torch.Tensor] = None):
    """Hard-mined tIoU loss. Returns (loss, selected indices).

    ``softmax``: K-way softmax loss against one-hot ``labels``.
    ``sigmoid``: per-class binary loss on the labeled class column against
    ``targets`` (completeness in {0, 1}).
    """
    n = logits.shape[0]
    if n == 0:
        raise ValueError("tIoU loss needs at least one sample")
    _check_one_hot(labels)
    if mode == "softmax":
        per_sample = -(F.log_softmax(logits, dim=1) * labels).sum(dim=1)
    elif mode == "sigmoid":
        if targets is None:
            raise ValueError("sigmoid mode needs completeness targets")
        col = (logits * labels).sum(dim=1)
        per_sample = F.binary_cross_entropy_with_logits(col, targets.to(logits.dtype),
                                                        reduction="none")
    else:
        raise ValueError(f"unknown tIoU mode {mode!r}")
    sel = hard_example_indices(per_sample, keep_fraction)
    idx = torch.as_tensor(sel, dtype=torch.long)
    return per_sample.index_select(0, idx).mean(), sel


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def regression_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the summed smooth-L1 of the (loc, len) residuals."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return smooth_l1(pred - target).sum(dim=1).mean()


def sub_losses(out: HeadOutputs, tg: BatchTargets, keep_fraction: float = 1 / 6,
               tiou_mode: str = "softmax") -> SubLosses:
    zero = out.action_logits.sum() * 0.0
    empty = []
    K1 = out.action_logits.shape[1]

    m = tg.action >= 0
    if bool(m.any()):
        labels = F.one_hot(tg.action[m], K1).to(out.action_logits.dtype)
        L_als = action_loss(out.action_logits[m], labels)
    else:
        L_als = zero
        empty.append("L_als")

    m = tg.tiou_class >= 0
    selected: List[int] = []
    if bool(m.any()):
        rows = torch.nonzero(m).flatten()
        labels = F.one_hot(tg.tiou_class[m], K1 - 1).to(out.tiou_logits.dtype)
        L_tiou, sel = tiou_loss_with_ohem(out.tiou_logits[m], labels, keep_fraction,
                                          tiou_mode, tg.tiou_target[m])
        selected = [int(rows[i]) for i in sel]
    else:
        L_tiou = zero
        empty.append("L_tIoU")

    m = tg.reg_mask
    if bool(m.any()):
        L_reg = regression_loss(out.regression[m], tg.offsets[m].to(out.regression.dtype))
    else:
        L_reg = zero
        empty.append("L_reg")
    return SubLosses(L_als, L_tiou, L_reg, selected, empty)


def principal_loss(out: HeadOutputs, tg: BatchTargets, weights: LossWeights,
                   aux_out: Optional[HeadOutputs] = None, keep_fraction: float = 1 / 6,
                   tiou_mode: str = "softmax") -> BatchLossReport:
    """Weighted multi-task loss on the main heads, plus the auxiliary copy.

    The auxiliary term has the same structure evaluated on ``aux_out`` and
    enters the total scaled by ``weights.aux_weight``.
    """
    main = sub_losses(out, tg, keep_fraction, tiou_mode)
    principal = main.weighted(weights)
    total = principal
    aux_val = None
    flags = list(main.empty)
    if aux_out is not None:
        aux = sub_losses(aux_out, tg, keep_fraction, tiou_mode)
        aux_val = aux.weighted(weights)
        total = total + weights.aux_weight * aux_val
        flags += [f"aux:{e}" for e in aux.empty]
    return BatchLossReport(
        L_als=_scalar(main.L_als), L_tIoU=_scalar(main.L_tIoU), L_reg=_scalar(main.L_reg),
        principal=_scalar(principal), auxiliary=_scalar(aux_val) if aux_val is not None else 0.0,
        total=_scalar(total), selected_hard_indices=main.selected, flags=flags,
        total_tensor=total, principal_tensor=principal, auxiliary_tensor=aux_val)


def _scalar(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
