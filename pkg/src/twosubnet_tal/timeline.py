"""Frame/unit arithmetic, interval overlap, context augmentation and offset transforms.

Frames are 1-based and intervals are inclusive at both ends.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional


class EmptyVideoError(ValueError):
    """Raised when a video is shorter than a single unit."""


class DegenerateDetectionError(ValueError):
    """Raised when decoded offsets collapse an interval below one frame."""


@dataclass(frozen=True, order=True)
class TemporalInterval:
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if int(self.start_frame) != self.start_frame or int(self.end_frame) != self.end_frame:
            raise TypeError("interval bounds must be integers")
        object.__setattr__(self, "start_frame", int(self.start_frame))
        object.__setattr__(self, "end_frame", int(self.end_frame))
        if self.start_frame < 1:
            raise ValueError(f"start_frame must be >= 1, got {self.start_frame}")
        if self.end_frame < self.start_frame:
            raise ValueError(
                f"end_frame {self.end_frame} precedes start_frame {self.start_frame}")

    @property
    def duration(self) -> int:
        return self.end_frame - self.start_frame + 1

    @property
    def center(self) -> float:
        return 0.5 * (self.start_frame + self.end_frame)

    def contains(self, other: "TemporalInterval") -> bool:
        return self.start_frame <= other.start_frame and other.end_frame <= self.end_frame

    def to_json(self) -> dict:
        return {"start": self.start_frame, "end": self.end_frame}

    @classmethod
    def from_json(cls, obj: dict) -> "TemporalInterval":
        return cls(int(obj["start"]), int(obj["end"]))


@dataclass(frozen=True)
class Unit:
    index: int
    frames: TemporalInterval


@dataclass(frozen=True)
class AugmentedProposal:
    core: TemporalInterval
    extended: TemporalInterval
    units: tuple = field(default_factory=tuple)
    clamped: bool = False

    @property
    def num_units(self) -> int:
        return len(self.units)

    @property
    def unit_indices(self) -> List[int]:
        return [u.index for u in self.units]


@dataclass(frozen=True)
class OffsetPair:
    d_loc: float
    d_len: float


@dataclass(frozen=True)
class VideoHeader:
    """Video-level timing; the only place seconds and frames meet."""

    video_id: str
    frames: int
    fps: float

    def seconds_to_frame(self, t: float) -> int:
        return max(1, min(self.frames, int(math.floor(t * self.fps)) + 1))

    def frame_to_seconds(self, frame: int) -> float:
        return (frame - 1) / self.fps


def make_unit(index: int, unit_length: int) -> Unit:
    return Unit(index, TemporalInterval(unit_length * (index - 1) + 1, unit_length * index))


def partition_units(total_frames: int, unit_length: int) -> List[Unit]:
    if unit_length < 1:
        raise ValueError("unit_length must be >= 1")
    if total_frames < unit_length:
        raise EmptyVideoError(
            f"video of {total_frames} frames holds no unit of {unit_length} frames")
    return [make_unit(i, unit_length) for i in range(1, total_frames // unit_length + 1)]


def units_covering(interval: TemporalInterval, unit_length: int,
                   num_units: Optional[int] = None) -> List[Unit]:
    """Units overlapping ``interval``; trailing partial units are not counted."""
    first = (interval.start_frame - 1) // unit_length + 1
    last = (interval.end_frame - 1) // unit_length + 1
    if num_units is not None:
        last = min(last, num_units)
    return [make_unit(i, unit_length) for i in range(first, last + 1)]


def tiou(a: TemporalInterval, b: TemporalInterval) -> float:
    inter = min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame) + 1
    if inter <= 0:
        return 0.0
    union = a.duration + b.duration - inter
    return inter / union


def augment_proposal(p: TemporalInterval, video_frames: int,
                     unit_length: Optional[int] = None) -> AugmentedProposal:
    if p.end_frame > video_frames:
        raise ValueError(f"proposal {p} exceeds video of {video_frames} frames")
    d = p.duration
    raw_start = p.start_frame - d + 1
    raw_end = p.end_frame + d - 1
    start = max(1, raw_start)
    end = min(video_frames, raw_end)
    extended = TemporalInterval(start, end)
    units: tuple = ()
    if unit_length is not None:
        units = tuple(units_covering(extended, unit_length, video_frames // unit_length))
    return AugmentedProposal(core=p, extended=extended, units=units,
                             clamped=(start != raw_start or end != raw_end))


def encode_center_length(gt_loc: float, gt_len: float,
                         loc: float, length: float) -> OffsetPair:
    if length <= 0 or gt_len <= 0:
        raise ValueError("lengths must be positive")
    return OffsetPair((gt_loc - loc) / length, math.log(gt_len / length))


def decode_center_length(loc: float, length: float, pred: OffsetPair) -> tuple:
    return loc + pred.d_loc * length, length * math.exp(pred.d_len)


def encode_offsets(gt: TemporalInterval, anchor: TemporalInterval) -> OffsetPair:
    return encode_center_length(gt.center, gt.duration, anchor.center, anchor.duration)


def decode_real(anchor: TemporalInterval, pred: OffsetPair) -> tuple:
    """Real-valued (center, length) before rounding."""
    return decode_center_length(anchor.center, anchor.duration, pred)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def decode_offsets(anchor: TemporalInterval, pred: OffsetPair,
                   video_frames: Optional[int] = None) -> TemporalInterval:
    loc, length = decode_real(anchor, pred)
    # tolerance absorbs exp/log round-off on exact one-frame targets
    if not (math.isfinite(loc) and math.isfinite(length)) or length < 1.0 - 1e-9:
        raise DegenerateDetectionError(
            f"decoded length {length:.6g} < 1 frame from anchor {anchor}")
    start = _round_half_up(loc - (length - 1.0) / 2.0)
    end = start + _round_half_up(length) - 1
    start = max(1, start)
    if video_frames is not None:
        end = min(video_frames, end)
    if end < start:
        raise DegenerateDetectionError(f"decoded interval [{start}, {end}] lies outside the video")
    return TemporalInterval(start, end)
