"""Compiled inner loops shared by the coincidence and distance modules."""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def monotone_match_gain(x, y, window):
    """Minimum over monotone partial matchings of sum(min(|dx|/window, 1) - 1).

    Both inputs must be sorted.  Only pairs closer than ``window`` contribute,
    so the DP is restricted to that band; cost is O(len(x) + len(y) + band).
    """
    n = x.shape[0]
    m = y.shape[0]
    if n == 0 or m == 0:
        return 0.0
    if not math.isfinite(window):
        return -float(min(n, m))
    row = np.zeros(m + 1)
    top = 0
    lo = 0
    hi = 0
    for i in range(n):
        xi = x[i]
        while lo < m and y[lo] <= xi - window:
            lo += 1
        if hi < lo:
            hi = lo
        while hi < m and y[hi] < xi + window:
            hi += 1
        if hi <= lo:
            continue
        if hi > top:
            tail = row[top]
            for j in range(top + 1, hi + 1):
                row[j] = tail
            top = hi
        diag = row[lo]
        for j in range(lo + 1, hi + 1):
            old = row[j]
            d = abs(xi - y[j - 1]) / window
            g = (d if d < 1.0 else 1.0) - 1.0
            best = old
            left = row[j - 1]
            if left < best:
                best = left
            cand = diag + g
            if cand < best:
                best = cand
            diag = old
            row[j] = best
    return row[top]


@njit(cache=True, nogil=True)
def greedy_coincidences(a, b, radius):
    """Count A tags matched to a B tag within +-radius.

    A tags are scanned in time order; each takes the nearest unconsumed B tag
    inside its window (ties go to the earlier B tag).
    """
    n = a.shape[0]
    m = b.shape[0]
    used = np.zeros(m, dtype=np.bool_)
    start = 0
    count = 0
    for i in range(n):
        ai = a[i]
        while start < m and b[start] < ai - radius:
            start += 1
        best = -1
        best_d = 0
        j = start
        while j < m and b[j] <= ai + radius:
            if not used[j]:
                d = abs(b[j] - ai)
                if best < 0 or d < best_d:
                    best = j
                    best_d = d
            j += 1
        if best >= 0:
            used[best] = True
            count += 1
    return count


@njit(cache=True, nogil=True)
def nearest_differences(a, b, window):
    """For each A tag, ``b_nearest - a`` when the nearest B tag is within +-window."""
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty(n, dtype=np.int64)
    k = 0
    if m == 0:
        return out[:0]
    j = 0
    for i in range(n):
        ai = a[i]
        while j + 1 < m and b[j + 1] <= ai:
            j += 1
        best = b[j] - ai
        if j + 1 < m:
            d2 = b[j + 1] - ai
            if abs(d2) < abs(best):
                best = d2
        if abs(best) <= window:
            out[k] = best
            k += 1
    return out[:k]
