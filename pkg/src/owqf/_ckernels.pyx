# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loop kernels.  Same contracts as ``owqf._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs
from libc.stdlib cimport malloc, free

from .tensor import NumericError

cnp.import_array()


def linear_sum_assignment(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix contains non-finite entries")
    transposed = cost.shape[0] > cost.shape[1]
    cdef double[:, ::1] a = np.ascontiguousarray(cost.T if transposed else cost)
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    if n == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    r = []
    c = []
    for j in range(1, m + 1):
        if p[j]:
            r.append(p[j] - 1)
            c.append(j - 1)
    ra = np.asarray(r, dtype=np.intp)
    ca = np.asarray(c, dtype=np.intp)
    if transposed:
        ra, ca = ca, ra
    order = np.argsort(ra, kind="stable")
    return ra[order], ca[order]


def greedy_match(ious, thresholds):
    cdef double[:, ::1] iou = np.ascontiguousarray(ious, dtype=np.float64)
    cdef double[::1] thr = np.ascontiguousarray(thresholds, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t nd = iou.shape[0], ng = iou.shape[1], nt = thr.shape[0]
    tp_arr = np.zeros((nt, nd), dtype=np.uint8)
    cdef unsigned char[:, ::1] tp = tp_arr
    cdef unsigned char[::1] taken = np.zeros(max(ng, 1), dtype=np.uint8)
    cdef Py_ssize_t t, d, g, best
    cdef double best_iou, x
    for t in range(nt):
        for g in range(ng):
            taken[g] = 0
        for d in range(nd):
            best = -1
            best_iou = thr[t]
            for g in range(ng):
                if taken[g]:
                    continue
                x = iou[d, g]
                if x >= best_iou and (best < 0 or x > best_iou):
                    best = g
                    best_iou = x
            if best >= 0:
                taken[best] = 1
                tp[t, d] = 1
    return tp_arr


def peak_nms(score_map, double threshold, Py_ssize_t radius):
    cdef double[:, ::1] a = np.ascontiguousarray(score_map, dtype=np.float64)
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1]
    cdef Py_ssize_t i, j, di, dj, ii, jj, k, ki, kj, n_kept = 0, n_cand = 0
    cdef double x
    cdef bint is_max, ok
    vals = []
    flats = []
    for i in range(h):
        for j in range(w):
            x = a[i, j]
            if x <= threshold:
                continue
            is_max = True
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    ii = i + di
                    jj = j + dj
                    if (di != 0 or dj != 0) and 0 <= ii < h and 0 <= jj < w and a[ii, jj] > x:
                        is_max = False
            if is_max:
                vals.append(-x)
                flats.append(i * w + j)
    if not flats:
        return np.zeros(0, dtype=np.intp)
    order = np.lexsort((np.asarray(flats), np.asarray(vals)))
    cdef Py_ssize_t[::1] cand = np.asarray(flats, dtype=np.intp)[order]
    n_cand = cand.shape[0]
    kept_arr = np.empty(n_cand, dtype=np.intp)
    cdef Py_ssize_t[::1] kept = kept_arr
    for k in range(n_cand):
        i = cand[k] // w
        j = cand[k] % w
        ok = True
        for ii in range(n_kept):
            ki = kept[ii] // w
            kj = kept[ii] % w
            if fabs(<double>(ki - i)) <= radius and fabs(<double>(kj - j)) <= radius:
                ok = False
                break
        if ok:
            kept[n_kept] = cand[k]
            n_kept += 1
    return kept_arr[:n_kept].copy()
