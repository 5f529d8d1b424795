"""Synthetic videos with planted action instances.

Every video draws from its own generator seeded by (seed, video index), so
videos can be produced in any order or in parallel with identical results.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..proposals import GroundTruth
from ..timeline import TemporalInterval
from .data import Dataset, Video

_PATTERN_STREAM = 1_000_003


class GenerationError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    seed: int = 0
    num_train: int = 200
    num_test: int = 50
    frames: int = 480
    unit_length: int = 8
    num_classes: int = 5
    instances: Tuple[int, int] = (1, 3)
    duration: Tuple[int, int] = (40, 96)   # frames, inclusive range
    min_gap: int = 24                      # frames between instances and to the edges
    mode: str = "feature"
    noise: float = 0.2
    actionness_noise: float = 0.03
    feature_dim: int = 32
    image_size: Tuple[int, int] = (16, 16)
    fps: float = 30.0
    workers: int = 1

    def __post_init__(self):
        self.instances = tuple(self.instances)
        self.duration = tuple(self.duration)
        self.image_size = tuple(self.image_size)
        if self.num_classes < 2:
            raise GenerationError("need at least two classes")
        if self.mode not in ("feature", "pixel"):
            raise GenerationError(f"unknown mode {self.mode!r}")
        lo, hi = self.duration
        if not 1 <= lo <= hi <= self.frames:
            raise GenerationError(f"duration range {self.duration} outside video length")
        if self.instances[0] < 0 or self.instances[0] > self.instances[1]:
            raise GenerationError(f"bad instance count range {self.instances}")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("workers")
        return d


PRESETS = {
    "tiny5": SyntheticConfig(),
    "pixel-tiny": SyntheticConfig(num_train=16, num_test=6, frames=192, unit_length=4,
                                  num_classes=3, instances=(1, 2), duration=(24, 48),
                                  min_gap=12, mode="pixel", noise=0.05, feature_dim=16),
}


def preset(name: str, **overrides) -> SyntheticConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


def _place_instances(rng: np.random.Generator, cfg: SyntheticConfig) -> List[Tuple[int, int]]:
    count = int(rng.integers(cfg.instances[0], cfg.instances[1] + 1))
    durations = rng.integers(cfg.duration[0], cfg.duration[1] + 1, size=count)
    slack = cfg.frames - int(durations.sum()) - (count + 1) * cfg.min_gap
    if slack < 0:
        raise GenerationError(
            f"cannot pack {count} instances of {durations.tolist()} frames with gap "
            f"{cfg.min_gap} into {cfg.frames} frames")
    # split the slack into count + 1 extra gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=count))
    extra = np.diff(np.concatenate([[0], cuts, [slack]]))
    spans, pos = [], 1
    for k in range(count):
        pos += cfg.min_gap + int(extra[k])
        spans.append((pos, pos + int(durations[k]) - 1))
        pos += int(durations[k])
    return spans


def _coverage(frames_class: np.ndarray, unit_length: int, num_classes: int) -> np.ndarray:
    """U x K fraction of each unit's frames belonging to each class."""
    U = len(frames_class) // unit_length
    fc = frames_class[: U * unit_length].reshape(U, unit_length)
    return np.stack([(fc == k).mean(axis=1) for k in range(num_classes)], axis=1)


def _render_pixels(rng, cfg, frames_class, velocities):
    H, W = cfg.image_size
    T = cfg.frames
    texture = rng.uniform(0.0, 0.2, size=(H, W))
    imgs = np.empty((T, H, W, 3), dtype=np.uint8)
    flow = np.zeros((T, 2, H, W), dtype=np.float32)
    side = max(2, H // 4)
    pos = np.array([H / 2.0, W / 2.0])
    for t in range(T):
        img = texture + cfg.noise * rng.standard_normal((H, W))
        k = frames_class[t]
        if k >= 0:
            y0, x0 = int(pos[0]) % H, int(pos[1]) % W
            ys = (np.arange(side) + y0) % H
            xs = (np.arange(side) + x0) % W
            img[np.ix_(ys, xs)] = 1.0
            dy, dx = velocities[k]
            if t + 1 < T and frames_class[t + 1] == k:
                flow[t, 0][np.ix_(ys, xs)] = dx
                flow[t, 1][np.ix_(ys, xs)] = dy
            pos = pos + velocities[k]
        imgs[t] = (np.clip(img, 0.0, 1.0)[..., None] * 255).astype(np.uint8)
    return imgs, flow


def _make_video(idx: int, cfg: SyntheticConfig, patterns, background, velocities) -> Video:
    rng = np.random.default_rng([cfg.seed, idx])
    spans = _place_instances(rng, cfg)
    classes = rng.integers(0, cfg.num_classes, size=len(spans))
    frames_class = np.full(cfg.frames, -1, dtype=np.int64)
    instances = []
    for (s, e), k in zip(spans, classes):
        frames_class[s - 1:e] = k
        instances.append(GroundTruth(TemporalInterval(s, e), int(k)))
    cov = _coverage(frames_class, cfg.unit_length, cfg.num_classes)  # U x K
    inside = cov.sum(axis=1)
    U = cov.shape[0]
    act = 0.1 + 0.8 * inside + cfg.actionness_noise * rng.standard_normal(U)
    v = Video(f"video_{idx:05d}", cfg.frames, cfg.fps, cfg.unit_length, instances,
              np.clip(act, 0.0, 1.0))
    if cfg.mode == "feature":
        # 2 x U x D: class patterns mixed by coverage over the background pattern
        mean = np.einsum("uk,ksd->sud", cov, patterns) + (1.0 - inside)[None, :, None] * background[:, None, :]
        noise = cfg.noise * rng.standard_normal(mean.shape)
        v.features = (mean + noise).astype(np.float32)
    else:
        v.pixels, v.flow = _render_pixels(rng, cfg, frames_class, velocities)
    return v


def generate_synthetic_dataset(cfg: SyntheticConfig) -> Dataset:
    prng = np.random.default_rng([cfg.seed, _PATTERN_STREAM])
    patterns = prng.standard_normal((cfg.num_classes, 2, cfg.feature_dim))
    background = prng.standard_normal((2, cfg.feature_dim))
    angles = 2 * np.pi * np.arange(cfg.num_classes) / cfg.num_classes
    velocities = np.stack([np.sin(angles), np.cos(angles)], axis=1) * 1.0
    total = cfg.num_train + cfg.num_test

    def make(i):
        return _make_video(i, cfg, patterns, background, velocities)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            videos = list(ex.map(make, range(total)))
    else:
        videos = [make(i) for i in range(total)]
    ids = [v.video_id for v in videos]
    return Dataset(cfg.mode, cfg.num_classes, cfg.feature_dim, cfg.unit_length,
                   {v.video_id: v for v in videos},
                   {"train": ids[:cfg.num_train], "test": ids[cfg.num_train:]},
                   cfg.image_size)


def class_patterns(cfg: SyntheticConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(K x 2 x D class patterns, 2 x D background) used by the generator."""
    prng = np.random.default_rng([cfg.seed, _PATTERN_STREAM])
    return (prng.standard_normal((cfg.num_classes, 2, cfg.feature_dim)),
            prng.standard_normal((2, cfg.feature_dim)))
