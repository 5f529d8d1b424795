"""Video -> detections: grouping, augmentation, both subnets, fusion, NMS, refinement."""
from __future__ import annotations

from typing import List, Sequence

import torch

from .inference import Detection, refine_boundaries, temporal_nms
from .model import TwoSubnetModel, candidate_proposals, feasible
from .timeline import OffsetPair, augment_proposal
from .training import TrainConfig, UnitFeatureSource


@torch.no_grad()
def detect_video(model: TwoSubnetModel, dataset, video, cfg: TrainConfig,
                 chunk: int = 256) -> List[Detection]:
    model.eval()
    props = [augment_proposal(c, video.frames, video.unit_length)
             for c in candidate_proposals(video, cfg.proposals)]
    props = [p for p in props if feasible(p, model.min_units)]
    if not props:
        return []
    feats = UnitFeatureSource(model, dataset, None)([video.video_id])
    dets, offsets = [], []
    K = model.num_classes
    for lo in range(0, len(props), chunk):
        part = props[lo:lo + chunk]
        maps = model.proposal_maps(feats, [(video.video_id, p) for p in part])
        out, _ = model(maps, with_aux=False)
        act = torch.softmax(out.action_logits.double(), dim=1)
        if cfg.tiou_mode == "softmax":
            comp = torch.softmax(out.tiou_logits.double(), dim=1)
        else:
            comp = torch.sigmoid(out.tiou_logits.double())
        reg = out.regression.double()
        for j, p in enumerate(part):
            off = OffsetPair(float(reg[j, 0]), float(reg[j, 1]))
            for k in range(K):
                dets.append(Detection.create(video.video_id, p.core, k,
                                             float(act[j, k + 1]), float(comp[j, k])))
                offsets.append(off)
    index = {id(d): i for i, d in enumerate(dets)}
    kept = temporal_nms(dets, cfg.nms_threshold)
    return refine_boundaries(kept, [offsets[index[id(d)]] for d in kept],
                             {video.video_id: video.frames})


def detect_split(model: TwoSubnetModel, dataset, split: str, cfg: TrainConfig) -> List[Detection]:
    out = []
    for v in dataset.split(split):
        out.extend(detect_video(model, dataset, v, cfg))
    return out


def ground_truth_detections(dataset, split: str) -> List[Detection]:
    """Every annotated instance as a perfect-score detection (pipeline sanity)."""
    return [Detection.create(v.video_id, g.interval, g.class_id, 1.0, 1.0)
            for v in dataset.split(split) for g in v.instances]
