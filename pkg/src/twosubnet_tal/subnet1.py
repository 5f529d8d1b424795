"""Unit-level two-stream features and the auxiliary supervision heads.

A spatial backbone maps one RGB frame per unit to a D-dim vector; a temporal
backbone maps the unit's stacked flow planes (2 * unit_length channels) to a
D-dim vector. Per-proposal feature maps are the unit vectors laid out as
columns in temporal order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .timeline import AugmentedProposal


class ConfigurationError(ValueError):
    pass


class ProposalTooShortError(ValueError):
    pass


@dataclass
class BackboneConfig:
    mode: str = "feature"  # "pixel" or "feature"
    feature_dim: int = 32
    widths: Tuple[int, ...] = (8, 16)
    height: int = 16
    width: int = 16
    unit_length: int = 8

    def __post_init__(self):
        if self.mode not in ("pixel", "feature"):
            raise ConfigurationError(f"unknown backbone mode {self.mode!r}")
        if self.feature_dim < 8:
            raise ConfigurationError("feature_dim must be >= 8")
        if self.mode == "pixel" and (self.height < 8 or self.width < 8):
            raise ConfigurationError("pixel mode needs H, W >= 8")
        self.widths = tuple(self.widths)


@dataclass
class ProposalFeatureMaps:
    V_s: torch.Tensor  # D x M
    V_t: torch.Tensor  # D x M

    @property
    def num_units(self) -> int:
        return self.V_s.shape[1]


class ConvBackbone(nn.Module):
    """Strided 3x3 conv stack, global average pool, linear map to D."""

    def __init__(self, in_channels: int, widths: Sequence[int], feature_dim: int):
        super().__init__()
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.ReLU()]
            c = w
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(c, feature_dim)
        self.in_channels = in_channels

    def forward(self, x):
        x = self.convs(x)
        return self.fc(x.mean(dim=(2, 3)))


def _check_input(x: torch.Tensor, channels: int, cfg: BackboneConfig, what: str):
    if x.shape[-3:] != (channels, cfg.height, cfg.width):
        raise ConfigurationError(
            f"{what} of shape {tuple(x.shape[-3:])} does not match configured "
            f"{(channels, cfg.height, cfg.width)}")


def extract_spatial_feature(frame: torch.Tensor, backbone: ConvBackbone,
                            cfg: BackboneConfig) -> torch.Tensor:
    _check_input(frame, 3, cfg, "RGB frame")
    return backbone(frame.unsqueeze(0))[0]


def extract_temporal_feature(stack: torch.Tensor, backbone: ConvBackbone,
                             cfg: BackboneConfig) -> torch.Tensor:
    _check_input(stack, 2 * cfg.unit_length, cfg, "flow stack")
    return backbone(stack.unsqueeze(0))[0]


def third_bounds(m: int) -> Tuple[int, int]:
    """Column split points of the three parts; outer parts get floor(M/3)."""
    k = m // 3
    return k, m - k


def pool_thirds(V: torch.Tensor) -> List[torch.Tensor]:
    m = V.shape[1]
    if m < 3:
        raise ProposalTooShortError(f"need at least 3 units for three parts, got {m}")
    a, b = third_bounds(m)
    return [V[:, :a].mean(dim=1), V[:, a:b].mean(dim=1), V[:, b:].mean(dim=1)]


class AuxiliaryHeads(nn.Module):
    def __init__(self, feature_dim: int, num_classes: int):
        super().__init__()
        self.action = nn.Linear(feature_dim, num_classes + 1)
        self.tiou = nn.Linear(3 * feature_dim, num_classes)
        self.regression = nn.Linear(3 * feature_dim, 2)

    def fuse(self, maps: ProposalFeatureMaps) -> Tuple[torch.Tensor, torch.Tensor]:
        ps = pool_thirds(maps.V_s)
        pt = pool_thirds(maps.V_t)
        middle = 0.5 * ps[1] + 0.5 * pt[1]
        whole = 0.5 * torch.cat(ps) + 0.5 * torch.cat(pt)
        return middle, whole

    def forward(self, maps_list: Sequence[ProposalFeatureMaps]):
        fused = [self.fuse(m) for m in maps_list]
        middle = torch.stack([f[0] for f in fused])
        whole = torch.stack([f[1] for f in fused])
        return self.action(middle), self.tiou(whole), self.regression(whole)


def auxiliary_heads(maps: ProposalFeatureMaps, heads: AuxiliaryHeads):
    """Single-proposal view: (action logits K+1, tIoU logits K, offsets (2,))."""
    a, t, r = heads([maps])
    return a[0], t[0], r[0]


class SubnetOne(nn.Module):
    """Both stream backbones (pixel mode only) plus the auxiliary heads."""

    def __init__(self, cfg: BackboneConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        if cfg.mode == "pixel":
            self.spatial = ConvBackbone(3, cfg.widths, cfg.feature_dim)
            self.temporal = ConvBackbone(2 * cfg.unit_length, cfg.widths, cfg.feature_dim)
        else:
            self.spatial = None
            self.temporal = None
        self.aux = AuxiliaryHeads(cfg.feature_dim, num_classes)

    def unit_features(self, video) -> Tuple[torch.Tensor, torch.Tensor]:
        """All units of a video -> (D x U spatial, D x U temporal)."""
        if self.cfg.mode == "feature":
            return video.features_s, video.features_t
        return self.encode_units(video.unit_frames, video.unit_flows)

    def encode_units(self, frames: torch.Tensor, flows: torch.Tensor):
        """Per-unit inputs (U x 3 x H x W frames, U x 2n_u x H x W flows) -> D x U maps."""
        if self.cfg.mode != "pixel":
            raise ConfigurationError("encode_units needs pixel-mode backbones")
        if frames.shape[0] != flows.shape[0]:
            raise ConfigurationError(
                f"{frames.shape[0]} frames but {flows.shape[0]} flow stacks")
        _check_input(frames, 3, self.cfg, "RGB frames")
        _check_input(flows, 2 * self.cfg.unit_length, self.cfg, "flow stacks")
        dtype = self.aux.action.weight.dtype
        return (self.spatial(frames.to(dtype)).T, self.temporal(flows.to(dtype)).T)


def build_feature_maps(p: AugmentedProposal, unit_s: torch.Tensor, unit_t: torch.Tensor,
                       unit_indices: Optional[Sequence[int]] = None) -> ProposalFeatureMaps:
    """Gather the proposal's unit columns from per-video D x U unit features.

    ``unit_indices`` (1-based) defaults to the units recorded on ``p``. When the
    caller passes per-proposal features directly (D x M), pass
    ``unit_indices=range(1, M + 1)``.
    """
    idx = list(unit_indices) if unit_indices is not None else p.unit_indices
    if p.units and len(idx) != len(p.units):
        raise ConfigurationError(
            f"proposal spans {len(p.units)} units but {len(idx)} inputs were given")
    if unit_s.shape[1] < max(idx, default=0) or unit_t.shape[1] < max(idx, default=0):
        raise ConfigurationError("unit index beyond available unit features")
    cols = torch.as_tensor([i - 1 for i in idx], dtype=torch.long)
    return ProposalFeatureMaps(unit_s.index_select(1, cols), unit_t.index_select(1, cols))
