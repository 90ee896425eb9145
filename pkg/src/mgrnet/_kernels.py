"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The active implementation is chosen once at import time. Set
``MGRNET_NUMBA=0`` to force the numpy path (useful for debugging and for
the benchmark in ``benchmarks/bench_kernels.py``). Both paths are kept
importable through :data:`NUMBA_IMPL` and :data:`NUMPY_IMPL`.

All kernels take float64 arrays. Batched inputs are flattened to a single
leading axis by the public wrappers in :mod:`mgrnet.graph` and friends.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("MGRNET_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _pdist_np(x):
    # x: (B, n, D) -> (B, n, n); each unordered pair computed once.
    b, n, _ = x.shape
    out = np.zeros((b, n, n))
    iu, ju = np.triu_indices(n, k=1)
    if iu.size:
        diff = x[:, iu, :] - x[:, ju, :]
        d = np.sqrt(np.einsum("bkd,bkd->bk", diff, diff))
        out[:, iu, ju] = d
        out[:, ju, iu] = d
    return out


def _pdist_backward_np(x, dist, grad):
    # d dist_ij / d x_i = (x_i - x_j) / dist_ij ; zero where dist_ij == 0.
    g = grad + np.swapaxes(grad, -1, -2)
    safe = np.where(dist > 0.0, dist, 1.0)
    w = np.where(dist > 0.0, g / safe, 0.0)
    return w.sum(axis=-1)[..., None] * x - w @ x


def _batch_hard_np(dist, labels):
    same = labels[:, None] == labels[None, :]
    pos = np.where(same, dist, -np.inf)
    neg = np.where(same, np.inf, dist)
    hp = np.argmax(pos, axis=1)
    hn = np.argmin(neg, axis=1)
    has_neg = (~same).any(axis=1)
    hn = np.where(has_neg, hn, -1)
    return hp.astype(np.int64), hn.astype(np.int64)


def _retrieval_np(dist, q_ids, q_groups, g_ids, g_groups):
    nq = dist.shape[0]
    ap = np.full(nq, np.nan)
    first_hit = np.full(nq, -1, dtype=np.int64)
    for q in range(nq):
        keep = ~((g_ids == q_ids[q]) & (g_groups == q_groups[q]))
        idx = np.nonzero(keep)[0]
        order = idx[np.argsort(dist[q, idx], kind="stable")]
        rel = g_ids[order] == q_ids[q]
        hits = np.nonzero(rel)[0]
        if hits.size == 0:
            continue
        ap[q] = np.mean(np.arange(1, hits.size + 1) / (hits + 1.0))
        first_hit[q] = hits[0]
    return ap, first_hit


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @numba.njit(cache=True)
    def _pdist_nb(x):
        b, n, d = x.shape
        out = np.zeros((b, n, n))
        for s in range(b):
            for i in range(n):
                for j in range(i + 1, n):
                    acc = 0.0
                    for k in range(d):
                        t = x[s, i, k] - x[s, j, k]
                        acc += t * t
                    v = np.sqrt(acc)
                    out[s, i, j] = v
                    out[s, j, i] = v
        return out

    @numba.njit(cache=True)
    def _pdist_backward_nb(x, dist, grad):
        b, n, d = x.shape
        out = np.zeros((b, n, d))
        for s in range(b):
            for i in range(n):
                for j in range(i + 1, n):
                    dij = dist[s, i, j]
                    if dij <= 0.0:
                        continue
                    w = (grad[s, i, j] + grad[s, j, i]) / dij
                    for k in range(d):
                        t = w * (x[s, i, k] - x[s, j, k])
                        out[s, i, k] += t
                        out[s, j, k] -= t
        return out

    @numba.njit(cache=True)
    def _batch_hard_nb(dist, labels):
        n = dist.shape[0]
        hp = np.zeros(n, dtype=np.int64)
        hn = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            best_p = -np.inf
            best_n = np.inf
            for j in range(n):
                v = dist[i, j]
                if labels[j] == labels[i]:
                    if v > best_p:
                        best_p = v
                        hp[i] = j
                else:
                    if v < best_n:
                        best_n = v
                        hn[i] = j
        return hp, hn

    @numba.njit(cache=True)
    def _retrieval_nb(dist, q_ids, q_groups, g_ids, g_groups):
        nq, ng = dist.shape
        ap = np.full(nq, np.nan)
        first_hit = np.full(nq, -1, dtype=np.int64)
        for q in range(nq):
            order = np.argsort(dist[q], kind="mergesort")
            rank = 0
            npos = 0
            acc = 0.0
            for t in range(ng):
                g = order[t]
                if g_ids[g] == q_ids[q] and g_groups[g] == q_groups[q]:
                    continue
                rank += 1
                if g_ids[g] == q_ids[q]:
                    npos += 1
                    acc += npos / rank
                    if npos == 1:
                        first_hit[q] = rank - 1
            if npos > 0:
                ap[q] = acc / npos
        return ap, first_hit


NUMPY_IMPL = {
    "pdist": _pdist_np,
    "pdist_backward": _pdist_backward_np,
    "batch_hard": _batch_hard_np,
    "retrieval": _retrieval_np,
}

if HAS_NUMBA:
    NUMBA_IMPL = {
        "pdist": _pdist_nb,
        "pdist_backward": _pdist_backward_nb,
        "batch_hard": _batch_hard_nb,
        "retrieval": _retrieval_nb,
    }
else:  # pragma: no cover
    NUMBA_IMPL = dict(NUMPY_IMPL)

_ACTIVE = NUMBA_IMPL if USE_NUMBA else NUMPY_IMPL


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def pdist(x: np.ndarray) -> np.ndarray:
    """Batched Euclidean distance matrices, ``(B, n, D) -> (B, n, n)``."""
    return _ACTIVE["pdist"](np.ascontiguousarray(x, dtype=np.float64))


def pdist_backward(x: np.ndarray, dist: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return _ACTIVE["pdist_backward"](
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(dist, dtype=np.float64),
        np.ascontiguousarray(grad, dtype=np.float64),
    )


def batch_hard(dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hardest positive / negative index per anchor (lowest index on ties).

    Anchors without any negative get ``-1`` as negative index.
    """
    return _ACTIVE["batch_hard"](
        np.ascontiguousarray(dist, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.int64),
    )


def retrieval(dist, q_ids, q_groups, g_ids, g_groups):
    """Per-query AP and 0-based rank of the first positive.

    Gallery entries sharing identity and group with the query are dropped
    before ranking. Queries with no positive get ``nan`` AP and ``-1``.
    """
    return _ACTIVE["retrieval"](
        np.ascontiguousarray(dist, dtype=np.float64),
        np.ascontiguousarray(q_ids, dtype=np.int64),
        np.ascontiguousarray(q_groups, dtype=np.int64),
        np.ascontiguousarray(g_ids, dtype=np.int64),
        np.ascontiguousarray(g_groups, dtype=np.int64),
    )
