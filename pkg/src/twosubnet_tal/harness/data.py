"""In-memory videos/datasets and their on-disk formats.

Layout of a dataset directory::

    manifest.json        schema version, mode, dims, split lists, fingerprint
    annotations.json     [{video_id, frames, fps, instances: [{class, start, end}]}]
    actionness.json      {video_id: [per-unit score, ...]}
    features/<id>.bin    feature mode: unit feature file (see write_unit_features)
    pixels/<id>.frames.npy, pixels/<id>.flow.npy
                         pixel mode: frames (T,H,W,3) uint8, flow (T,2,H,W) float32
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from ..proposals import GroundTruth
from ..timeline import TemporalInterval

SCHEMA_VERSION = 1
FEATURE_MAGIC = b"UFEA"
_HEADER = struct.Struct("<4sIIII")  # magic, version, dim, units, streams


class DatasetFormatError(ValueError):
    pass


@dataclass
class Video:
    video_id: str
    frames: int
    fps: float
    unit_length: int
    instances: List[GroundTruth]
    actionness: np.ndarray
    features: Optional[np.ndarray] = None   # 2 x U x D float32 (spatial, temporal)
    pixels: Optional[np.ndarray] = None     # T x H x W x 3 uint8
    flow: Optional[np.ndarray] = None       # T x 2 x H x W float32
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_units(self) -> int:
        return self.frames // self.unit_length

    def unit_features(self, dtype=torch.float32):
        key = ("features", dtype)
        if key not in self._cache:
            f = torch.as_tensor(self.features, dtype=dtype)
            self._cache[key] = (f[0].T.contiguous(), f[1].T.contiguous())
        return self._cache[key]

    @property
    def features_s(self):
        return self.unit_features()[0]

    @property
    def features_t(self):
        return self.unit_features()[1]

    def unit_inputs(self, frame_offsets: Optional[np.ndarray] = None):
        """Per-unit pixel inputs: one RGB frame (U,3,H,W) and flow stack (U,2n_u,H,W).

        ``frame_offsets`` picks the frame inside each unit (0-based); the
        default is the center frame.
        """
        n_u, U = self.unit_length, self.num_units
        if frame_offsets is None:
            frame_offsets = np.full(U, (n_u - 1) // 2)
        idx = np.arange(U) * n_u + frame_offsets
        frames = torch.as_tensor(self.pixels[idx], dtype=torch.float32).permute(0, 3, 1, 2) / 255.0
        flow = self.flow[: U * n_u]
        H, W = flow.shape[-2:]
        stacks = torch.as_tensor(flow.reshape(U, n_u * 2, H, W), dtype=torch.float32)
        return frames, stacks

    def annotation(self) -> dict:
        return {"video_id": self.video_id, "frames": self.frames, "fps": self.fps,
                "instances": [{"class": g.class_id, "start": g.interval.start_frame,
                               "end": g.interval.end_frame} for g in self.instances]}


@dataclass
class Dataset:
    mode: str
    num_classes: int
    feature_dim: int
    unit_length: int
    videos: Dict[str, Video]
    splits: Dict[str, List[str]]
    image_size: tuple = (16, 16)

    def split(self, name: str) -> List[Video]:
        return [self.videos[v] for v in self.splits[name]]

    def ground_truths(self, split: str):
        return [(v.video_id, g.class_id, g.interval) for v in self.split(split) for g in v.instances]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.header(), sort_keys=True).encode())
        for vid in sorted(self.videos):
            v = self.videos[vid]
            h.update(json.dumps(v.annotation(), sort_keys=True).encode())
            h.update(np.ascontiguousarray(v.actionness, dtype="<f8").tobytes())
            for arr in (v.features, v.pixels, v.flow):
                if arr is not None:
                    h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def header(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "mode": self.mode,
                "num_classes": self.num_classes, "feature_dim": self.feature_dim,
                "unit_length": self.unit_length, "image_size": list(self.image_size),
                "splits": self.splits}


def write_unit_features(path, features: np.ndarray):
    """Binary unit features: little-endian header then float32 [stream][unit][dim]."""
    features = np.asarray(features, dtype="<f4")
    streams, units, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, SCHEMA_VERSION, dim, units, streams))
        fh.write(features.tobytes(order="C"))


def read_unit_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, dim, units, streams = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != SCHEMA_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != streams * units * dim:
        raise DatasetFormatError(f"{path}: expected {streams * units * dim} values, got {body.size}")
    return body.reshape(streams, units, dim).astype(np.float32)


def parse_annotations(obj) -> List[dict]:
    """Accept a bare list or a {schema_version, videos: [...]} document."""
    if isinstance(obj, dict):
        obj = obj.get("videos", [])
    out = []
    for rec in obj:
        for key in ("video_id", "frames", "fps", "instances"):
            if key not in rec:
                raise DatasetFormatError(f"annotation record missing {key!r}")
        out.append(rec)
    return out


def load_annotations(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return parse_annotations(json.load(fh))


def instances_from_record(rec: dict) -> List[GroundTruth]:
    return [GroundTruth(TemporalInterval(int(i["start"]), int(i["end"])), int(i["class"]))
            for i in rec["instances"]]


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _dump(root / "manifest.json", dict(ds.header(), fingerprint=ds.fingerprint()))
    _dump(root / "annotations.json",
          {"schema_version": SCHEMA_VERSION,
           "videos": [ds.videos[v].annotation() for v in sorted(ds.videos)]})
    _dump(root / "actionness.json",
          {"schema_version": SCHEMA_VERSION,
           "tracks": {v: [float(x) for x in ds.videos[v].actionness]
                      for v in sorted(ds.videos)}})
    sub = root / ("features" if ds.mode == "feature" else "pixels")
    sub.mkdir(exist_ok=True)
    for vid in sorted(ds.videos):
        v = ds.videos[vid]
        if ds.mode == "feature":
            write_unit_features(sub / f"{vid}.bin", v.features)
        else:
            np.save(sub / f"{vid}.frames.npy", v.pixels)
            np.save(sub / f"{vid}.flow.npy", v.flow)
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    with open(root / "manifest.json", encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(f"{root}: unsupported schema {header.get('schema_version')}")
    records = load_annotations(root / "annotations.json")
    with open(root / "actionness.json", encoding="utf-8") as fh:
        tracks = json.load(fh)["tracks"]
    n_u = int(header["unit_length"])
    videos = {}
    for rec in records:
        vid = rec["video_id"]
        v = Video(vid, int(rec["frames"]), float(rec["fps"]), n_u, instances_from_record(rec),
                  np.asarray(tracks[vid], dtype=np.float64))
        if header["mode"] == "feature":
            v.features = read_unit_features(root / "features" / f"{vid}.bin")
        else:
            v.pixels = np.load(root / "pixels" / f"{vid}.frames.npy")
            v.flow = np.load(root / "pixels" / f"{vid}.flow.npy")
        videos[vid] = v
    return Dataset(header["mode"], int(header["num_classes"]), int(header["feature_dim"]), n_u,
                   videos, {k: list(v) for k, v in header["splits"].items()},
                   tuple(header.get("image_size", (16, 16))))
