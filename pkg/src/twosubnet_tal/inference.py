"""Score fusion, per-class temporal NMS, boundary refinement and mAP evaluation."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .timeline import DegenerateDetectionError, OffsetPair, TemporalInterval, decode_offsets

AVERAGE_MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Detection:
    video_id: str
    interval: TemporalInterval
    class_id: int
    action_score: float
    tiou_score: float
    combined_score: float
    refined: bool = False
    refine_failed: bool = False

    @classmethod
    def create(cls, video_id: str, interval: TemporalInterval, class_id: int,
               action_score: float, tiou_score: float) -> "Detection":
        return cls(video_id, interval, class_id, action_score, tiou_score,
                   combine_scores(action_score, tiou_score))

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "video_id": self.video_id,
                "class": self.class_id,
                "start": self.interval.start_frame, "end": self.interval.end_frame,
                "score_a": self.action_score, "score_i": self.tiou_score,
                "score_s": self.combined_score}

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(obj["video_id"], TemporalInterval(obj["start"], obj["end"]), int(obj["class"]),
                   float(obj["score_a"]), float(obj["score_i"]), float(obj["score_s"]))


@dataclass
class EvaluationResult:
    thresholds: Tuple[float, ...]
    ap: Dict[float, Dict[int, float]]
    mAP: Dict[float, float]
    average_mAP: float
    excluded_classes: List[int] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + [f"{t:g}" for t in self.thresholds] + ["average"])
        w.writerow(["mAP"] + [f"{self.mAP[t]:.6f}" for t in self.thresholds]
                   + [f"{self.average_mAP:.6f}"])
        classes = sorted({c for t in self.thresholds for c in self.ap[t]})
        for c in classes:
            vals = [self.ap[t][c] for t in self.thresholds]
            w.writerow([f"AP class {c}"] + [f"{v:.6f}" for v in vals]
                       + [f"{sum(vals) / len(vals):.6f}"])
        return buf.getvalue()


def combine_scores(a: float, i: float) -> float:
    if not 0.0 <= i <= 1.0:
        raise ValueError(f"tIoU score {i} outside [0, 1]")
    return i * math.exp(a)


def _arrays(dets: Sequence[Detection]):
    starts = np.array([d.interval.start_frame for d in dets], dtype=np.int64)
    ends = np.array([d.interval.end_frame for d in dets], dtype=np.int64)
    scores = np.array([d.combined_score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    return starts, ends, scores, classes


def temporal_nms(detections: Sequence[Detection], threshold: float) -> List[Detection]:
    """Greedy per-class NMS within one video; returns survivors in selection order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("NMS threshold must lie in [0, 1]")
    if not detections:
        return []
    keep = kernels.nms(*_arrays(detections), float(threshold))
    return [detections[i] for i in keep]


def temporal_nms_videos(detections: Sequence[Detection], threshold: float) -> List[Detection]:
    by_video = defaultdict(list)
    for d in detections:
        by_video[d.video_id].append(d)
    out = []
    for vid in sorted(by_video):
        out.extend(temporal_nms(by_video[vid], threshold))
    return out


def refine_boundaries(detections: Sequence[Detection], regressions: Sequence[OffsetPair],
                      video_frames: Optional[Dict[str, int]] = None) -> List[Detection]:
    """Apply decoded offsets; a degenerate decode keeps the raw interval, flagged."""
    out = []
    for det, off in zip(detections, regressions, strict=True):
        limit = video_frames.get(det.video_id) if video_frames else None
        try:
            iv = decode_offsets(det.interval, off, limit)
            out.append(replace(det, interval=iv, refined=True))
        except DegenerateDetectionError:
            out.append(replace(det, refine_failed=True))
    return out


def rank_order(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].combined_score,
                                                    dets[i].interval.start_frame, i))


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP sequence."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / num_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for k in range(len(mpre) - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def average_precision(dets: Sequence[Detection], gts: Sequence[Tuple[str, TemporalInterval]],
                      threshold: float, strict: bool = True) -> float:
    """AP of single-class detections against (video_id, interval) ground truths."""
    if not gts:
        return 0.0
    order = rank_order(dets)
    videos = {v: k for k, v in enumerate(sorted({g[0] for g in gts} | {d.video_id for d in dets}))}
    ranked = [dets[i] for i in order]
    tp = kernels.match_detections(
        np.array([d.interval.start_frame for d in ranked], dtype=np.int64),
        np.array([d.interval.end_frame for d in ranked], dtype=np.int64),
        np.array([videos[d.video_id] for d in ranked], dtype=np.int64),
        np.array([g[1].start_frame for g in gts], dtype=np.int64),
        np.array([g[1].end_frame for g in gts], dtype=np.int64),
        np.array([videos[g[0]] for g in gts], dtype=np.int64),
        float(threshold), bool(strict))
    return interpolated_ap(tp, len(gts))


def evaluate(detections: Sequence[Detection], ground_truths: Iterable,
             thresholds: Sequence[float] = AVERAGE_MAP_THRESHOLDS, strict: bool = True,
             classes: Optional[Iterable[int]] = None) -> EvaluationResult:
    """Per-class AP, mAP per threshold, and mAP averaged over ``thresholds``.

    ``ground_truths`` are (video_id, class_id, TemporalInterval) triples.
    Classes with no ground truth are left out of the mean and reported in
    ``excluded_classes``.
    """
    gt_by_class = defaultdict(list)
    for vid, cls, iv in ground_truths:
        gt_by_class[int(cls)].append((vid, iv))
    det_by_class = defaultdict(list)
    for d in detections:
        det_by_class[d.class_id].append(d)
    all_classes = set(gt_by_class) | set(det_by_class) | set(classes or ())
    scored = sorted(c for c in all_classes if gt_by_class.get(c))
    excluded = sorted(c for c in all_classes if not gt_by_class.get(c))
    thresholds = tuple(thresholds)
    ap = {t: {c: average_precision(det_by_class.get(c, []), gt_by_class[c], t, strict)
              for c in scored} for t in thresholds}
    mAP = {t: (sum(ap[t].values()) / len(scored) if scored else 0.0) for t in thresholds}
    avg = sum(mAP.values()) / len(thresholds) if thresholds else 0.0
    return EvaluationResult(thresholds, ap, mAP, avg, excluded)


def write_detections(path, detections: Sequence[Detection]):
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")


def read_detections(path) -> List[Detection]:
    with open(path, encoding="utf-8") as fh:
        return [Detection.from_json(json.loads(line)) for line in fh if line.strip()]
