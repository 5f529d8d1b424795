"""Model checkpoints tagged with schedule position and config hash."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from ..model import TwoSubnetModel
from ..training import TrainConfig

CHECKPOINT_SCHEMA = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    num_classes: int
    phase: str
    iteration: int
    state_dict: dict

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def build_model(self) -> TwoSubnetModel:
        dtype = next(iter(self.state_dict.values())).dtype
        model = TwoSubnetModel(self.config.backbone, self.config.subnet2, self.num_classes)
        model.to(dtype).load_state_dict(self.state_dict)
        return model.eval()


def save_checkpoint(path, model: TwoSubnetModel, cfg: TrainConfig, phase: str,
                    iteration: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    torch.save({"schema_version": CHECKPOINT_SCHEMA, "config": cfg.to_json(),
                "config_hash": cfg.hash(), "num_classes": model.num_classes,
                "phase": phase, "iteration": iteration, "state_dict": state}, path)
    return path


def load_checkpoint(path, expected_hash: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: unsupported schema {blob.get('schema_version')!r}")
    cfg = TrainConfig.from_json(blob["config"])
    if cfg.hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected_hash is not None and expected_hash != blob["config_hash"]:
        raise CheckpointError(f"{path}: config hash {blob['config_hash']} != expected "
                              f"{expected_hash}")
    return Checkpoint(cfg, int(blob["num_classes"]), blob["phase"], int(blob["iteration"]),
                      blob["state_dict"])
