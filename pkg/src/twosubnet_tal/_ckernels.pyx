# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled interval kernels; mirrors ``_kernels_py`` argument for argument."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()


cdef inline double _iou(int64_t s1, int64_t e1, int64_t s2, int64_t e2) nogil:
    cdef int64_t lo = s1 if s1 > s2 else s2
    cdef int64_t hi = e1 if e1 < e2 else e2
    cdef int64_t inter = hi - lo + 1
    if inter <= 0:
        return 0.0
    return <double>inter / <double>((e1 - s1 + 1) + (e2 - s2 + 1) - inter)


def tiou_matrix(starts_a, ends_a, starts_b, ends_b):
    cdef int64_t[::1] sa = np.ascontiguousarray(starts_a, dtype=np.int64)
    cdef int64_t[::1] ea = np.ascontiguousarray(ends_a, dtype=np.int64)
    cdef int64_t[::1] sb = np.ascontiguousarray(starts_b, dtype=np.int64)
    cdef int64_t[::1] eb = np.ascontiguousarray(ends_b, dtype=np.int64)
    cdef Py_ssize_t na = sa.shape[0], nb = sb.shape[0], i, j
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(na):
            for j in range(nb):
                o[i, j] = _iou(sa[i], ea[i], sb[j], eb[j])
    return out


def nms(starts, ends, scores, classes, double threshold):
    cdef int64_t[::1] s = np.ascontiguousarray(starts, dtype=np.int64)
    cdef int64_t[::1] e = np.ascontiguousarray(ends, dtype=np.int64)
    cdef int64_t[::1] c = np.ascontiguousarray(classes, dtype=np.int64)
    sc = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0]
    # lexsort keys: last key is primary
    order_arr = np.lexsort((np.arange(n), np.asarray(c), np.asarray(s), -sc)).astype(np.int64)
    cdef int64_t[::1] order = order_arr
    sup_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] sup = sup_arr
    keep_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] keep = keep_arr
    cdef Py_ssize_t pos, q, nk = 0
    cdef int64_t i, j
    with nogil:
        for pos in range(n):
            i = order[pos]
            if sup[i]:
                continue
            keep[nk] = i
            nk += 1
            for q in range(pos + 1, n):
                j = order[q]
                if sup[j] or c[j] != c[i]:
                    continue
                if _iou(s[i], e[i], s[j], e[j]) > threshold:
                    sup[j] = 1
    return keep_arr[:nk].copy()


def match_detections(det_starts, det_ends, det_groups, gt_starts, gt_ends, gt_groups,
                     double threshold, bint strict=True):
    cdef int64_t[::1] ds = np.ascontiguousarray(det_starts, dtype=np.int64)
    cdef int64_t[::1] de = np.ascontiguousarray(det_ends, dtype=np.int64)
    cdef int64_t[::1] dg = np.ascontiguousarray(det_groups, dtype=np.int64)
    cdef int64_t[::1] gs = np.ascontiguousarray(gt_starts, dtype=np.int64)
    cdef int64_t[::1] ge = np.ascontiguousarray(gt_ends, dtype=np.int64)
    cdef int64_t[::1] gg = np.ascontiguousarray(gt_groups, dtype=np.int64)
    cdef Py_ssize_t n = ds.shape[0], m = gs.shape[0], i, j, best_j
    tp_arr = np.zeros(n, dtype=np.int64)
    cdef int64_t[::1] tp = tp_arr
    used_arr = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] used = used_arr
    cdef double best, ov
    cdef bint ok
    with nogil:
        for i in range(n):
            best = -1.0
            best_j = -1
            for j in range(m):
                if used[j] or gg[j] != dg[i]:
                    continue
                ov = _iou(ds[i], de[i], gs[j], ge[j])
                if ov > best:
                    best = ov
                    best_j = j
            if best_j >= 0:
                ok = best > threshold if strict else best >= threshold
                if ok:
                    used[best_j] = 1
                    tp[i] = 1
    return tp_arr


def threshold_runs(scores, double threshold, int64_t merge_gap):
    cdef double[::1] v = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], i
    out_arr = np.empty((n, 2), dtype=np.int64)
    cdef int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t r = 0
    cdef int64_t start = -1, last = -1
    with nogil:
        for i in range(n):
            if v[i] >= threshold:
                if start < 0:
                    start = i
                elif i - last - 1 > merge_gap:
                    out[r, 0] = start
                    out[r, 1] = last
                    r += 1
                    start = i
                last = i
        if start >= 0:
            out[r, 0] = start
            out[r, 1] = last
            r += 1
    return out_arr[:r].copy()
