"""Training presets, dataset-aligned configs, and run manifests."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .. import __version__
from ..training import TrainConfig
from .data import Dataset, load_dataset
from .synthetic import SyntheticConfig, generate_synthetic_dataset, preset

MANIFEST_SCHEMA = 1


class ManifestError(ValueError):
    pass


def _tiny5() -> TrainConfig:
    # per-class sigmoid tIoU: the softmax form cannot rank fragments below full instances
    return TrainConfig(tiou_mode="sigmoid")


def _pixel_tiny() -> TrainConfig:
    return TrainConfig(batch_size=32, iterations=(30, 30, 10), tiou_mode="sigmoid")


TRAIN_PRESETS = {"tiny5": _tiny5, "pixel-tiny": _pixel_tiny}


def train_preset(name: Optional[str]) -> TrainConfig:
    if name is None:
        return TrainConfig()
    if name not in TRAIN_PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return TRAIN_PRESETS[name]()


def align_to_dataset(cfg: TrainConfig, ds: Dataset) -> TrainConfig:
    """Copy of ``cfg`` whose backbone matches the dataset's modality and sizes."""
    bb = dataclasses.replace(cfg.backbone, mode=ds.mode, feature_dim=ds.feature_dim,
                             unit_length=ds.unit_length, height=ds.image_size[0],
                             width=ds.image_size[1])
    return dataclasses.replace(cfg, backbone=bb)


@dataclass
class DataSource:
    """Either a synthetic config or a dataset directory."""

    synthetic: Optional[SyntheticConfig] = None
    path: Optional[str] = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.path is None):
            raise ValueError("data source needs exactly one of synthetic config or path")

    def load(self) -> Dataset:
        if self.synthetic is not None:
            return generate_synthetic_dataset(self.synthetic)
        return load_dataset(self.path)

    def to_json(self) -> dict:
        if self.synthetic is not None:
            return {"synthetic": self.synthetic.to_json()}
        return {"path": self.path}

    @classmethod
    def from_json(cls, obj: dict) -> "DataSource":
        if "synthetic" in obj:
            return cls(synthetic=SyntheticConfig(**obj["synthetic"]))
        return cls(path=obj["path"])

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "DataSource":
        return cls(synthetic=preset(name, **overrides))


@dataclass
class RunManifest:
    config: TrainConfig
    data: DataSource
    dataset_fingerprint: str
    tool_version: str = __version__

    def to_json(self) -> dict:
        return {"schema_version": MANIFEST_SCHEMA, "tool_version": self.tool_version,
                "config": self.config.to_json(), "config_hash": self.config.hash(),
                "data": self.data.to_json(), "dataset_fingerprint": self.dataset_fingerprint}

    @classmethod
    def from_json(cls, obj: dict) -> "RunManifest":
        if obj.get("schema_version") != MANIFEST_SCHEMA:
            raise ManifestError(f"unsupported manifest schema {obj.get('schema_version')!r}")
        cfg = TrainConfig.from_json(obj["config"])
        if cfg.hash() != obj["config_hash"]:
            raise ManifestError("manifest config does not match its recorded hash")
        return cls(cfg, DataSource.from_json(obj["data"]), obj["dataset_fingerprint"],
                   obj["tool_version"])

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def load_dataset(self) -> Dataset:
        ds = self.data.load()
        if ds.fingerprint() != self.dataset_fingerprint:
            raise ManifestError("dataset fingerprint differs from the manifest")
        return ds
