import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twosubnet_tal.inference import (Detection, average_precision, combine_scores, evaluate,
                                     interpolated_ap, read_detections, refine_boundaries,
                                     temporal_nms, temporal_nms_videos, write_detections)
from twosubnet_tal.timeline import OffsetPair, TemporalInterval, encode_offsets, tiou


def det(s, e, score=0.5, cls=0, vid="v", i=1.0):
    return Detection.create(vid, TemporalInterval(s, e), cls, score, i)


def test_combine_scores():
    assert combine_scores(0.0, 0.5) == 0.5
    assert combine_scores(1.0, 1.0) == pytest.approx(math.e)
    assert combine_scores(2.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        combine_scores(0.3, 1.5)


def test_exponential_emphasis():
    # a higher action score can outrank a higher tIoU score
    assert combine_scores(0.9, 0.5) > combine_scores(0.2, 0.8)


# -- NMS ---------------------------------------------------------------------

def oracle_nms(dets, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].combined_score,
                                                    dets[i].interval.start_frame,
                                                    dets[i].class_id, i))
    kept = []
    for i in order:
        if all(dets[k].class_id != dets[i].class_id or
               tiou(dets[k].interval, dets[i].interval) <= thr for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def random_dets(rng, n, classes=3, hi=200):
    out = []
    for _ in range(n):
        s = int(rng.integers(1, hi))
        e = s + int(rng.integers(0, 40))
        score = float(rng.choice([0.2, 0.4, 0.6])) if rng.random() < 0.3 else float(rng.random())
        out.append(det(s, e, score, int(rng.integers(0, classes)), i=float(rng.random())))
    return out


def test_nms_oracle_200_cases():
    rng = np.random.default_rng(2024)
    for case in range(200):
        dets = random_dets(rng, int(rng.integers(0, 40)))
        thr = float(rng.choice([0.0, 0.2, 0.5, 0.7, 1.0]))
        assert temporal_nms(dets, thr) == oracle_nms(dets, thr), case


def test_nms_basic():
    a, b, c = det(1, 10, 0.9), det(2, 11, 0.8), det(2, 11, 0.8, cls=1)
    assert temporal_nms([b, a, c], 0.2) == [a, c]
    assert temporal_nms([b, a], 0.9) == [a, b]


def test_nms_threshold_range():
    with pytest.raises(ValueError):
        temporal_nms([det(1, 2)], 1.5)


def test_nms_per_video():
    a, b = det(1, 10, 0.9, vid="a"), det(1, 10, 0.8, vid="b")
    assert temporal_nms_videos([a, b], 0.2) == [a, b]


# -- AP ----------------------------------------------------------------------

def oracle_ap(dets, gts, thr, strict=True):
    """Greedy matching by rank, then the sum of staircase rectangles.

    For each distinct recall level r_k the rectangle height is the best
    precision reached at any rank whose recall is at least r_k.
    """
    ranked = sorted(dets, key=lambda d: (-d.combined_score, d.interval.start_frame))
    used = set()
    hits = []
    for d in ranked:
        cands = [(tiou(d.interval, g), -j) for j, (v, g) in enumerate(gts)
                 if v == d.video_id and j not in used]
        ok = False
        if cands:
            ov, negj = max(cands)
            if ov > thr if strict else ov >= thr:
                used.add(-negj)
                ok = True
        hits.append(ok)
    points = []
    tp = 0
    for k, h in enumerate(hits, start=1):
        tp += h
        points.append((tp / len(gts), tp / k))
    levels = sorted({r for r, _ in points if r > 0})
    total, prev = 0.0, 0.0
    for r in levels:
        height = max(p for rr, p in points if rr >= r)
        total += (r - prev) * height
        prev = r
    return total


def test_ap_oracle_100_cases():
    rng = np.random.default_rng(7)
    for case in range(100):
        n_gt = int(rng.integers(1, 6))
        gts = []
        for _ in range(n_gt):
            s = int(rng.integers(1, 80))
            gts.append((str(rng.integers(0, 2)), TemporalInterval(s, s + int(rng.integers(3, 30)))))
        dets = []
        for _ in range(int(rng.integers(0, 21))):
            if gts and rng.random() < 0.5:
                v, g = gts[int(rng.integers(0, len(gts)))]
                s = max(1, g.start_frame + int(rng.integers(-6, 7)))
                e = max(s, g.end_frame + int(rng.integers(-6, 7)))
            else:
                v, s = str(rng.integers(0, 2)), int(rng.integers(1, 80))
                e = s + int(rng.integers(0, 30))
            dets.append(det(s, e, float(rng.random()), vid=v))
        thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        got = average_precision(dets, gts, thr)
        assert abs(got - oracle_ap(dets, gts, thr)) <= 1e-9, case


def test_ap_examples():
    assert interpolated_ap(np.array([1, 0, 1]), 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert interpolated_ap(np.array([1, 1]), 2) == 1.0
    assert interpolated_ap(np.array([0, 0]), 2) == 0.0
    assert interpolated_ap(np.array([]), 3) == 0.0


def test_strict_threshold():
    gt = [("v", TemporalInterval(1, 10))]
    d = [det(1, 5)]  # tIoU exactly 0.5
    assert average_precision(d, gt, 0.5, strict=True) == 0.0
    assert average_precision(d, gt, 0.5, strict=False) == 1.0


def test_evaluate_gt_as_detections():
    gts = [("a", 0, TemporalInterval(1, 10)), ("a", 1, TemporalInterval(20, 40)),
           ("b", 1, TemporalInterval(5, 9))]
    dets = [det(iv.start_frame, iv.end_frame, 1.0, c, v) for v, c, iv in gts]
    res = evaluate(dets, gts, classes=range(3))
    assert all(v == 1.0 for v in res.mAP.values())
    assert res.average_mAP == 1.0
    assert res.excluded_classes == [2]
    assert res.to_csv().splitlines()[1].startswith("mAP,1.000000")


def test_evaluate_wrong_class():
    gts = [("a", 0, TemporalInterval(1, 10))]
    res = evaluate([det(1, 10, 1.0, 1, "a")], gts, (0.5,))
    assert res.mAP[0.5] == 0.0
    assert res.excluded_classes == [1]


# -- refinement and file format ----------------------------------------------

def test_refine():
    d = det(8, 11)
    off = encode_offsets(TemporalInterval(7, 14), d.interval)
    (r,) = refine_boundaries([d], [off])
    assert r.interval == TemporalInterval(7, 14) and r.refined
    (bad,) = refine_boundaries([d], [OffsetPair(0.0, -20.0)])
    assert bad.interval == d.interval and bad.refine_failed


def test_refine_clamps_to_video():
    d = det(1, 10)
    (r,) = refine_boundaries([d], [OffsetPair(-0.5, 0.0)], {"v": 100})
    assert r.interval.start_frame >= 1


def test_refine_length_mismatch():
    with pytest.raises(ValueError):
        refine_boundaries([det(1, 2)], [])


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(1, 100), st.integers(0, 20), st.floats(0, 1),
                          st.floats(0, 1)), max_size=10))
def test_jsonl_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("d") / "dets.jsonl"
    dets = [det(s, s + d, a, i=i) for s, d, a, i in rows]
    write_detections(path, dets)
    back = read_detections(path)
    assert [(b.interval, b.combined_score, b.action_score) for b in back] == \
        [(x.interval, x.combined_score, x.action_score) for x in dets]
    for line in path.read_text().splitlines():
        assert '"schema_version": 1' in line
