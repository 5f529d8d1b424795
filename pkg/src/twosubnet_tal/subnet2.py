"""Stage modeling over proposal feature maps.

Pipeline per stream: self-adaptive pooling into 3*alpha segment vectors,
grouped before/during/after; one FC recoder per stage group; one residual
capture module per stage; heads reading f_d (action) and [f_b, f_d, f_a]
(tIoU, regression).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

STAGES = ("before", "during", "after")


class TooFewUnitsError(ValueError):
    pass


class ShapeUnderflowError(ValueError):
    pass


@dataclass
class PooledStages:
    R_b: torch.Tensor  # alpha x D
    R_d: torch.Tensor
    R_a: torch.Tensor

    def groups(self):
        return self.R_b, self.R_d, self.R_a


@dataclass
class RecodedStages:
    D_b: torch.Tensor  # alpha x n
    D_d: torch.Tensor
    D_a: torch.Tensor

    def groups(self):
        return self.D_b, self.D_d, self.D_a


@dataclass
class HeadOutputs:
    action_logits: torch.Tensor  # N x (K+1)
    tiou_logits: torch.Tensor    # N x K
    regression: torch.Tensor     # N x 2

    def average(self, other: "HeadOutputs") -> "HeadOutputs":
        return HeadOutputs(0.5 * (self.action_logits + other.action_logits),
                           0.5 * (self.tiou_logits + other.tiou_logits),
                           0.5 * (self.regression + other.regression))


def segment_bounds(m: int, alpha: int) -> List[Tuple[int, int]]:
    """0-based half-open column ranges of the 3*alpha segments."""
    s = 3 * alpha
    if m < s:
        raise TooFewUnitsError(f"{m} units cannot fill {s} segments (alpha={alpha})")
    return [((j - 1) * m // s, j * m // s) for j in range(1, s + 1)]


def self_adaptive_pool(V: torch.Tensor, alpha: int, method: str = "average") -> PooledStages:
    bounds = segment_bounds(V.shape[1], alpha)
    if method == "average":
        r = [V[:, a:b].mean(dim=1) for a, b in bounds]
    elif method == "max":
        r = [V[:, a:b].amax(dim=1) for a, b in bounds]
    else:
        raise ValueError(f"unknown pooling method {method!r}")
    r = torch.stack(r)  # 3alpha x D
    return PooledStages(r[:alpha], r[alpha:2 * alpha], r[2 * alpha:])


def pooling_matrix(m: int, alpha: int, dtype=torch.float64) -> torch.Tensor:
    """M x 3alpha averaging matrix; V @ P gives the segment means."""
    P = np.zeros((m, 3 * alpha))
    for j, (a, b) in enumerate(segment_bounds(m, alpha)):
        P[a:b, j] = 1.0 / (b - a)
    return torch.as_tensor(P, dtype=dtype)


def recode(R: PooledStages, W, b) -> RecodedStages:
    """d_j = W r_j + b with one (W, b), or a per-group triple of them."""
    if not isinstance(W, (list, tuple)):
        W, b = (W, W, W), (b, b, b)
    out = []
    for Rg, Wg, bg in zip(R.groups(), W, b):
        if Wg.shape[1] != Rg.shape[1] or bg.shape[0] != Wg.shape[0]:
            raise ValueError(
                f"recode shapes W{tuple(Wg.shape)}, b{tuple(bg.shape)} vs r of dim {Rg.shape[1]}")
        out.append(Rg @ Wg.T + bg)
    return RecodedStages(*out)


# -- capture module ---------------------------------------------------------

@dataclass
class CaptureConfig:
    """Layer plan of the residual capture module.

    Stage s (2..5) has an ``_a`` block with stride ``stage_strides[s-2]`` and a
    ``_b`` block with stride 1. ``pool_kernel=None`` means global average.
    """

    widths: Tuple[int, ...] = (32, 64, 128, 256, 512)
    conv1_stride: Tuple[int, int] = (2, 2)
    stage_strides: Tuple[Tuple[int, int], ...] = ((2, 1), (2, 1), (2, 1), (2, 2))
    pool_kernel: Optional[Tuple[int, int]] = (3, 2)
    pool_stride: Tuple[int, int] = (2, 1)
    batch_norm: bool = True

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.conv1_stride = tuple(self.conv1_stride)
        self.stage_strides = tuple(tuple(s) for s in self.stage_strides)
        self.pool_kernel = tuple(self.pool_kernel) if self.pool_kernel is not None else None
        self.pool_stride = tuple(self.pool_stride)
        if len(self.widths) != 1 + len(self.stage_strides):
            raise ValueError("widths must list conv1 plus one width per stage")

    @classmethod
    def reference(cls) -> "CaptureConfig":
        return cls()

    @classmethod
    def compact(cls, widths=(8, 16, 16, 32, 32)) -> "CaptureConfig":
        return cls(widths=widths, conv1_stride=(2, 1),
                   stage_strides=((1, 1), (2, 1), (1, 1), (2, 1)),
                   pool_kernel=None, pool_stride=(1, 1))

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "CaptureConfig":
        return cls(**obj)

    def layer_names(self) -> List[str]:
        names = ["conv1"]
        for s in range(2, 2 + len(self.stage_strides)):
            names += [f"conv{s}_a", f"conv{s}_b"]
        return names + ["avg pool"]

    def trace(self, alpha: int, n: int) -> Dict[str, Tuple[int, int, int]]:
        """Analytic output shape of every layer for a 1 x n x alpha input."""
        def conv(hw, stride, name):
            h = (hw[0] + 2 - 3) // stride[0] + 1
            w = (hw[1] + 2 - 3) // stride[1] + 1
            if hw[0] < 1 or hw[1] < 1 or h < 1 or w < 1:
                raise ShapeUnderflowError(f"layer {name}: input {hw} too small")
            return h, w

        shapes = {}
        hw = conv((n, alpha), self.conv1_stride, "conv1")
        shapes["conv1"] = (self.widths[0],) + hw
        for i, st in enumerate(self.stage_strides):
            s = i + 2
            hw = conv(hw, st, f"conv{s}_a")
            shapes[f"conv{s}_a"] = (self.widths[i + 1],) + hw
            shapes[f"conv{s}_b"] = (self.widths[i + 1],) + hw
        if self.pool_kernel is None:
            shapes["avg pool"] = (self.widths[-1], 1, 1)
        else:
            kh, kw = self.pool_kernel
            if hw[0] < kh or hw[1] < kw:
                raise ShapeUnderflowError(
                    f"layer avg pool: kernel {self.pool_kernel} exceeds input {hw}")
            shapes["avg pool"] = (self.widths[-1], (hw[0] - kh) // self.pool_stride[0] + 1,
                                  (hw[1] - kw) // self.pool_stride[1] + 1)
        return shapes

    def output_dim(self, alpha: int, n: int) -> int:
        return int(np.prod(self.trace(alpha, n)["avg pool"]))


class BasicBlock(nn.Module):
    """Two 3x3 convs with a residual shortcut (1x1 strided conv on downsampling)."""

    def __init__(self, cin: int, cout: int, stride, batch_norm: bool = True):
        super().__init__()
        norm = (lambda c: nn.BatchNorm2d(c)) if batch_norm else (lambda c: nn.Identity())
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=not batch_norm)
        self.bn1 = norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=not batch_norm)
        self.bn2 = norm(cout)
        if tuple(stride) != (1, 1) or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=not batch_norm), norm(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CaptureModule(nn.Module):
    def __init__(self, cfg: CaptureConfig):
        super().__init__()
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.conv1 = nn.Sequential(
            nn.Conv2d(1, w0, 3, stride=cfg.conv1_stride, padding=1, bias=not cfg.batch_norm),
            nn.BatchNorm2d(w0) if cfg.batch_norm else nn.Identity(),
            nn.ReLU())
        blocks = []
        cin = w0
        for i, st in enumerate(cfg.stage_strides):
            cout = cfg.widths[i + 1]
            blocks.append(BasicBlock(cin, cout, st, cfg.batch_norm))
            blocks.append(BasicBlock(cout, cout, (1, 1), cfg.batch_norm))
            cin = cout
        self.blocks = nn.ModuleList(blocks)

    def _pool(self, x):
        if self.cfg.pool_kernel is None:
            return x.mean(dim=(2, 3), keepdim=True)
        return F.avg_pool2d(x, self.cfg.pool_kernel, self.cfg.pool_stride)

    def forward(self, x, trace: Optional[dict] = None):
        """x: B x 1 x n x alpha -> B x output_dim."""
        self.cfg.trace(x.shape[3], x.shape[2])  # raises on underflow
        x = self.conv1(x)
        names = self.cfg.layer_names()
        if trace is not None:
            trace["conv1"] = tuple(x.shape[1:])
        for name, block in zip(names[1:-1], self.blocks):
            x = block(x)
            if trace is not None:
                trace[name] = tuple(x.shape[1:])
        x = self._pool(x)
        if trace is not None:
            trace["avg pool"] = tuple(x.shape[1:])
        return x.flatten(1)


def capture_forward(D_stage: torch.Tensor, module: CaptureModule,
                    trace: Optional[dict] = None) -> torch.Tensor:
    """One alpha x n stage map -> flattened capture vector."""
    x = D_stage.T.unsqueeze(0).unsqueeze(0)  # 1 x 1 x n x alpha
    return module(x, trace)[0]


class StageHeads(nn.Module):
    def __init__(self, feat_dim: int, num_classes: int):
        super().__init__()
        self.action = nn.Linear(feat_dim, num_classes + 1)
        self.tiou = nn.Linear(3 * feat_dim, num_classes)
        self.regression = nn.Linear(3 * feat_dim, 2)

    def forward(self, f_b, f_d, f_a) -> HeadOutputs:
        f = torch.cat([f_b, f_d, f_a], dim=-1)
        return HeadOutputs(self.action(f_d), self.tiou(f), self.regression(f))


def stage_heads(f_b, f_d, f_a, heads: StageHeads) -> HeadOutputs:
    return heads(f_b, f_d, f_a)


@dataclass
class SubnetTwoConfig:
    alpha: int = 9
    n: Optional[int] = 129  # None disables recoding
    pooling: str = "average"
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    share_streams: bool = False

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["capture"] = self.capture.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SubnetTwoConfig":
        obj = dict(obj)
        obj["capture"] = CaptureConfig.from_json(obj["capture"])
        return cls(**obj)


class StreamModel(nn.Module):
    """Pool -> recode -> capture x3 -> heads, for one stream."""

    def __init__(self, cfg: SubnetTwoConfig, feature_dim: int, num_classes: int,
                 captures: Optional[nn.ModuleList] = None):
        super().__init__()
        self.cfg = cfg
        height = cfg.n if cfg.n is not None else feature_dim
        if cfg.n is not None:
            self.recoders = nn.ModuleList([nn.Linear(feature_dim, cfg.n) for _ in STAGES])
        else:
            self.recoders = None
        self.captures = captures if captures is not None else nn.ModuleList(
            [CaptureModule(cfg.capture) for _ in STAGES])
        self.out_dim = cfg.capture.output_dim(cfg.alpha, height)
        self.heads = StageHeads(self.out_dim, num_classes)

    def pool_batch(self, maps: Sequence[torch.Tensor]) -> torch.Tensor:
        """List of D x M maps -> N x 3alpha x D."""
        out = []
        for V in maps:
            if self.cfg.pooling == "average":
                P = pooling_matrix(V.shape[1], self.cfg.alpha, V.dtype)
                out.append((V @ P).T)
            else:
                out.append(torch.cat(self_adaptive_pool(V, self.cfg.alpha, "max").groups()))
        return torch.stack(out)

    def forward(self, maps: Sequence[torch.Tensor]) -> HeadOutputs:
        a = self.cfg.alpha
        r = self.pool_batch(maps)
        feats = []
        for g in range(3):
            Rg = r[:, g * a:(g + 1) * a, :]
            Dg = self.recoders[g](Rg) if self.recoders is not None else Rg
            feats.append(self.captures[g](Dg.transpose(1, 2).unsqueeze(1)))
        return self.heads(*feats)


class SubnetTwo(nn.Module):
    def __init__(self, cfg: SubnetTwoConfig, feature_dim: int, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.spatial = StreamModel(cfg, feature_dim, num_classes)
        shared = self.spatial.captures if cfg.share_streams else None
        self.temporal = StreamModel(cfg, feature_dim, num_classes, captures=shared)

    def forward(self, maps_s: Sequence[torch.Tensor], maps_t: Sequence[torch.Tensor]) -> HeadOutputs:
        return self.spatial(maps_s).average(self.temporal(maps_t))
