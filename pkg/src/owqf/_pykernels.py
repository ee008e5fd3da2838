"""Pure-Python loop kernels.  Mirrors ``_ckernels.pyx`` line for line."""
import math

import numpy as np

from .tensor import NumericError


def linear_sum_assignment(cost):
    """Minimum-cost one-to-one assignment of min(P, G) pairs.

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^2 m).  Returns ``(rows, cols)`` sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix contains non-finite entries")
    transposed = cost.shape[0] > cost.shape[1]
    a = cost.T if transposed else cost
    n, m = a.shape
    if n == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    rows = a.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    r = np.asarray(r, dtype=np.intp)
    c = np.asarray(c, dtype=np.intp)
    if transposed:
        r, c = c, r
    order = np.argsort(r, kind="stable")
    return r[order], c[order]


def greedy_match(ious, thresholds):
    """Score-ordered greedy matching at every threshold.

    ``ious[d, g]`` for detections already sorted by descending score; entries
    < 0 mark pairs that may never match (different images).  Each detection
    takes the highest-IoU unmatched ground truth at or above the threshold,
    lowest index on ties.  Returns ``tp[t, d]`` as uint8.
    """
    ious = np.asarray(ious, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    nd, ng = ious.shape
    tp = np.zeros((thresholds.size, nd), dtype=np.uint8)
    rows = ious.tolist()
    for t, thr in enumerate(thresholds.tolist()):
        taken = [False] * ng
        out = tp[t]
        for d in range(nd):
            row = rows[d]
            best = -1
            best_iou = thr
            for g in range(ng):
                if taken[g]:
                    continue
                x = row[g]
                if x >= best_iou and (best < 0 or x > best_iou):
                    best = g
                    best_iou = x
            if best >= 0:
                taken[best] = True
                out[d] = 1
    return tp


def peak_nms(score_map, threshold, radius):
    """Local maxima above ``threshold``, greedily suppressed within ``radius`` cells.

    Returns flat indices in descending value order (ties by flat index).
    """
    a = np.asarray(score_map, dtype=np.float64)
    h, w = a.shape
    grid = a.tolist()
    cand = []
    for i in range(h):
        for j in range(w):
            x = grid[i][j]
            if x <= threshold:
                continue
            is_max = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii = i + di
                    jj = j + dj
                    if (di or dj) and 0 <= ii < h and 0 <= jj < w and grid[ii][jj] > x:
                        is_max = False
            if is_max:
                cand.append((-x, i * w + j))
    cand.sort()
    kept = []
    for _, flat in cand:
        i, j = divmod(flat, w)
        ok = True
        for k in kept:
            ki, kj = divmod(k, w)
            if abs(ki - i) <= radius and abs(kj - j) <= radius:
                ok = False
                break
        if ok:
            kept.append(flat)
    return np.asarray(kept, dtype=np.intp)
