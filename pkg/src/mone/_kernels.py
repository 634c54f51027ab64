"""Hot inner loops: top-k routing selection and per-expert Welford scatter.

Each kernel has a numba implementation and a pure-numpy implementation with
the same contract. ``MONE_DISABLE_NUMBA=1`` (or numba being absent) selects
the numpy path at import time. Both paths are always importable by name so
tests and the benchmark can compare them in one process.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_DISABLED = os.environ.get("MONE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")
USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------------------
# top-k selection
# ---------------------------------------------------------------------------

def topk_rows_numpy(scores, k):
    """Row-wise top-k: descending score, ties to the lower column index."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(scores, order, axis=1)


def _topk_rows_loop(scores, k):
    n, m = scores.shape
    idx = np.empty((n, k), dtype=np.int64)
    vals = np.empty((n, k), dtype=np.float64)
    taken = np.zeros(m, dtype=np.bool_)
    for r in range(n):
        taken[:] = False
        for j in range(k):
            best = -1
            best_val = -np.inf
            for c in range(m):
                # strict '>' keeps the lowest index among equal scores
                if not taken[c] and (best < 0 or scores[r, c] > best_val):
                    best = c
                    best_val = scores[r, c]
            taken[best] = True
            idx[r, j] = best
            vals[r, j] = best_val
    return idx, vals


# ---------------------------------------------------------------------------
# Welford scatter: feed (expert, gate, output) observations into M accumulators
# ---------------------------------------------------------------------------

def _welford_scatter_loop(n, score_sum, mean, m2, experts, gates, outputs):
    d = outputs.shape[1]
    for r in range(experts.shape[0]):
        e = experts[r]
        n[e] += 1
        score_sum[e] += gates[r]
        cnt = n[e]
        for c in range(d):
            delta = outputs[r, c] - mean[e, c]
            mean[e, c] += delta / cnt
            m2[e, c] += delta * (outputs[r, c] - mean[e, c])


def welford_scatter_numpy(n, score_sum, mean, m2, experts, gates, outputs):
    """Chunked variant: two-pass moments per expert, then a pairwise merge.

    Equivalent to observing the rows one at a time up to floating-point
    reassociation. Arrays ``n``, ``score_sum``, ``mean``, ``m2`` are updated in
    place.
    """
    if experts.size == 0:
        return
    order = np.argsort(experts, kind="stable")
    sorted_e = experts[order]
    present, starts = np.unique(sorted_e, return_index=True)
    bounds = np.append(starts, sorted_e.size)
    for j, e in enumerate(present):
        rows = order[bounds[j]:bounds[j + 1]]
        chunk = outputs[rows]
        nb = rows.size
        mean_b = chunk.mean(axis=0)
        dev = chunk - mean_b
        m2_b = np.einsum("ij,ij->j", dev, dev)
        na = n[e]
        tot = na + nb
        delta = mean_b - mean[e]
        mean[e] = mean[e] + delta * (nb / tot)
        m2[e] = m2[e] + m2_b + delta * delta * (na * nb / tot)
        n[e] = tot
        score_sum[e] += gates[rows].sum()


if HAVE_NUMBA:
    topk_rows_numba = njit(cache=True, nogil=True)(_topk_rows_loop)
    welford_scatter_numba = njit(cache=True, nogil=True)(_welford_scatter_loop)
else:  # pragma: no cover
    topk_rows_numba = _topk_rows_loop
    welford_scatter_numba = _welford_scatter_loop


def topk_rows(scores, k):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if USE_NUMBA:
        return topk_rows_numba(scores, int(k))
    return topk_rows_numpy(scores, int(k))


def welford_scatter(n, score_sum, mean, m2, experts, gates, outputs):
    experts = np.ascontiguousarray(experts, dtype=np.int64)
    gates = np.ascontiguousarray(gates, dtype=np.float64)
    outputs = np.ascontiguousarray(outputs, dtype=np.float64)
    if USE_NUMBA:
        welford_scatter_numba(n, score_sum, mean, m2, experts, gates, outputs)
    else:
        welford_scatter_numpy(n, score_sum, mean, m2, experts, gates, outputs)


def backend():
    return "numba" if USE_NUMBA else "numpy"
