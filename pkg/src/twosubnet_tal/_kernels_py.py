"""Pure-Python interval kernels.

Reference implementations of the routines in ``_ckernels.pyx``. Both modules
expose the same four functions with the same argument conventions:
inclusive integer frame bounds, int64 arrays, float64 scores.
"""
import numpy as np


def tiou_matrix(starts_a, ends_a, starts_b, ends_b):
    sa = np.asarray(starts_a, dtype=np.int64)[:, None]
    ea = np.asarray(ends_a, dtype=np.int64)[:, None]
    sb = np.asarray(starts_b, dtype=np.int64)[None, :]
    eb = np.asarray(ends_b, dtype=np.int64)[None, :]
    inter = np.minimum(ea, eb) - np.maximum(sa, sb) + 1
    inter = np.maximum(inter, 0)
    union = (ea - sa + 1) + (eb - sb + 1) - inter
    return inter / union


def _iou(s1, e1, s2, e2):
    inter = min(e1, e2) - max(s1, s2) + 1
    if inter <= 0:
        return 0.0
    return inter / ((e1 - s1 + 1) + (e2 - s2 + 1) - inter)


def nms(starts, ends, scores, classes, threshold):
    """Greedy per-class suppression; returns kept indices in selection order.

    Order is score descending, then earlier start, then lower class, then
    lower input index, so the result does not depend on input order beyond
    exact duplicates.
    """
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], starts[i], classes[i], i))
    suppressed = [False] * n
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if suppressed[j] or classes[j] != classes[i]:
                continue
            if _iou(starts[i], ends[i], starts[j], ends[j]) > threshold:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)


def match_detections(det_starts, det_ends, det_groups, gt_starts, gt_ends, gt_groups,
                     threshold, strict=True):
    """Flag each detection (already in rank order) as true positive or not.

    A detection claims the unmatched ground truth of the same group with the
    highest tIoU, provided that tIoU passes the threshold.
    """
    n = len(det_starts)
    tp = np.zeros(n, dtype=np.int64)
    used = [False] * len(gt_starts)
    for i in range(n):
        best = -1.0
        best_j = -1
        for j in range(len(gt_starts)):
            if used[j] or gt_groups[j] != det_groups[i]:
                continue
            ov = _iou(det_starts[i], det_ends[i], gt_starts[j], gt_ends[j])
            if ov > best:
                best = ov
                best_j = j
        if best_j >= 0 and (best > threshold if strict else best >= threshold):
            used[best_j] = True
            tp[i] = 1
    return tp


def threshold_runs(scores, threshold, merge_gap):
    """Maximal runs of entries >= threshold, bridging gaps of <= merge_gap.

    Returns an (R, 2) int64 array of inclusive 0-based index pairs.
    """
    runs = []
    start = -1
    last = -1
    for i, v in enumerate(scores):
        if v >= threshold:
            if start < 0:
                start = i
            elif i - last - 1 > merge_gap:
                runs.append((start, last))
                start = i
            last = i
    if start >= 0:
        runs.append((start, last))
    return np.asarray(runs, dtype=np.int64).reshape(-1, 2)
