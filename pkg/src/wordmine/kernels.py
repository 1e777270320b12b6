"""Dynamic-programming kernels for alignment and warping.

Every kernel has two implementations with identical per-cell arithmetic:

* ``*_jit``: scalar loops compiled with ``numba.njit``.
* ``*_numpy``: anti-diagonal wavefront, each diagonal vectorised with numpy.

Cells on one anti-diagonal depend only on the two previous diagonals, so both
paths perform the same floating-point operations in the same order per cell
and return bit-identical arrays.

The public names (``nw_fill``, ``dtw_fill``, ``subseq_dtw_fill``) dispatch to
the backend chosen by the ``WORDMINE_BACKEND`` environment variable
(``numba`` or ``numpy``), read once at import. ``numba`` is the default when it
imports cleanly.
"""

from __future__ import annotations

import os

import numpy as np

# pointer codes shared by both backends
DIAG, UP, LEFT, ORIGIN = 0, 1, 2, -1

_requested = os.environ.get("WORDMINE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"WORDMINE_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def _njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=False, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# Needleman-Wunsch, semi-global (free gaps on both target flanks)
# ---------------------------------------------------------------------------


def _nw_init(n, m, gap):
    D = np.empty((n + 1, m + 1), dtype=np.float64)
    P = np.empty((n + 1, m + 1), dtype=np.int8)
    D[0, :] = 0.0
    P[0, :] = ORIGIN
    for i in range(1, n + 1):
        D[i, 0] = D[i - 1, 0] + gap
        P[i, 0] = UP
    return D, P


@_njit
def nw_fill_jit(query, target, match, mismatch, gap):
    n = query.shape[0]
    m = target.shape[0]
    D = np.empty((n + 1, m + 1), dtype=np.float64)
    P = np.empty((n + 1, m + 1), dtype=np.int8)
    for j in range(m + 1):
        D[0, j] = 0.0
        P[0, j] = -1
    for i in range(1, n + 1):
        D[i, 0] = D[i - 1, 0] + gap
        P[i, 0] = 1
    for i in range(1, n + 1):
        qi = query[i - 1]
        for j in range(1, m + 1):
            s = match if qi == target[j - 1] else mismatch
            diag = D[i - 1, j - 1] + s
            up = D[i - 1, j] + gap
            left = D[i, j - 1] + gap
            if diag >= up and diag >= left:
                D[i, j] = diag
                P[i, j] = 0
            elif up >= left:
                D[i, j] = up
                P[i, j] = 1
            else:
                D[i, j] = left
                P[i, j] = 2
    return D, P


def nw_fill_numpy(query, target, match, mismatch, gap):
    query = np.asarray(query)
    target = np.asarray(target)
    n, m = query.shape[0], target.shape[0]
    D, P = _nw_init(n, m, gap)
    sub = np.where(query[:, None] == target[None, :], match, mismatch).astype(np.float64)
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        diag = D[i - 1, j - 1] + sub[i - 1, j - 1]
        up = D[i - 1, j] + gap
        left = D[i, j - 1] + gap
        take_diag = (diag >= up) & (diag >= left)
        take_up = ~take_diag & (up >= left)
        D[i, j] = np.where(take_diag, diag, np.where(take_up, up, left))
        P[i, j] = np.where(take_diag, DIAG, np.where(take_up, UP, LEFT))
    return D, P


# ---------------------------------------------------------------------------
# DTW on a precomputed local-cost matrix; sums and path lengths tracked
# together, tie-break diagonal > vertical > horizontal.
# ---------------------------------------------------------------------------


@_njit
def _dtw_core_jit(cost, free_start):
    n, m = cost.shape
    inf = np.inf
    D = np.empty((n + 1, m + 1), dtype=np.float64)
    L = np.zeros((n + 1, m + 1), dtype=np.int64)
    B = np.zeros((n + 1, m + 1), dtype=np.int64)
    for j in range(m + 1):
        D[0, j] = 0.0 if free_start else inf
        B[0, j] = j
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        D[i, 0] = inf
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = D[i - 1, j - 1]
            up = D[i - 1, j]
            left = D[i, j - 1]
            if diag <= up and diag <= left:
                D[i, j] = cost[i - 1, j - 1] + diag
                L[i, j] = L[i - 1, j - 1] + 1
                B[i, j] = B[i - 1, j - 1]
            elif up <= left:
                D[i, j] = cost[i - 1, j - 1] + up
                L[i, j] = L[i - 1, j] + 1
                B[i, j] = B[i - 1, j] if i > 1 else j - 1
            else:
                D[i, j] = cost[i - 1, j - 1] + left
                L[i, j] = L[i, j - 1] + 1
                B[i, j] = B[i, j - 1]
    return D, L, B


def _dtw_core_numpy(cost, free_start):
    n, m = cost.shape
    D = np.empty((n + 1, m + 1), dtype=np.float64)
    L = np.zeros((n + 1, m + 1), dtype=np.int64)
    B = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[0, :] = 0.0 if free_start else np.inf
    D[0, 0] = 0.0
    D[1:, 0] = np.inf
    B[0, :] = np.arange(m + 1)
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        diag = D[i - 1, j - 1]
        up = D[i - 1, j]
        left = D[i, j - 1]
        c = cost[i - 1, j - 1]
        take_diag = (diag <= up) & (diag <= left)
        take_up = ~take_diag & (up <= left)
        D[i, j] = np.where(take_diag, c + diag, np.where(take_up, c + up, c + left))
        L[i, j] = np.where(
            take_diag, L[i - 1, j - 1], np.where(take_up, L[i - 1, j], L[i, j - 1])
        ) + 1
        up_start = np.where(i > 1, B[i - 1, j], j - 1)
        B[i, j] = np.where(take_diag, B[i - 1, j - 1], np.where(take_up, up_start, B[i, j - 1]))
    return D, L, B


def dtw_fill_jit(cost):
    return _dtw_core_jit(np.ascontiguousarray(cost, dtype=np.float64), False)


def dtw_fill_numpy(cost):
    return _dtw_core_numpy(np.asarray(cost, dtype=np.float64), False)


def subseq_dtw_fill_jit(cost):
    return _dtw_core_jit(np.ascontiguousarray(cost, dtype=np.float64), True)


def subseq_dtw_fill_numpy(cost):
    return _dtw_core_numpy(np.asarray(cost, dtype=np.float64), True)


_IMPLS = {
    "numba": (nw_fill_jit, dtw_fill_jit, subseq_dtw_fill_jit),
    "numpy": (nw_fill_numpy, dtw_fill_numpy, subseq_dtw_fill_numpy),
}


def nw_fill(query, target, match, mismatch, gap):
    """Fill the semi-global alignment matrices ``(scores, pointers)``.

    Rows index the query, columns the target; row 0 is all zeros so the query
    may start anywhere in the target.
    """
    q = np.ascontiguousarray(query, dtype=np.int64)
    t = np.ascontiguousarray(target, dtype=np.int64)
    return _IMPLS[BACKEND][0](q, t, float(match), float(mismatch), float(gap))


def dtw_fill(cost):
    """Full DTW over an ``(n, m)`` local-cost matrix.

    Returns ``(sums, lengths, starts)`` padded to ``(n + 1, m + 1)``; cell
    ``(n, m)`` holds the minimal accumulated cost and the length of that path.
    """
    return _IMPLS[BACKEND][1](cost)


def subseq_dtw_fill(cost):
    """Like :func:`dtw_fill` but the path may start at any target column.

    ``starts[i, j]`` is the 0-based target column where the path to ``(i, j)``
    entered row 1.
    """
    return _IMPLS[BACKEND][2](cost)
