"""Hot numeric kernels: numba-compiled with a pure-numpy fallback.

Set FLOWCERT_NO_NUMBA=1 to force the numpy path (also taken when numba
is not importable). Both paths implement identical pivot and
accumulation rules, so results do not depend on the path chosen.
``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np

NUMBA_ENV_FLAG = "FLOWCERT_NO_NUMBA"

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

_flag = os.environ.get(NUMBA_ENV_FLAG, "").strip().lower()
USING_NUMBA = HAVE_NUMBA and _flag not in {"1", "true", "yes", "on"}


def _pivot_loop_impl(T, basis, ncols, tol, bland_after, max_iters):
    """Run simplex pivots in place on a dense tableau.

    T has the reduced-cost row at index 0 and the right-hand side in
    column ``ncols``; basis[i] is the column basic in row i+1. Entering
    column: most negative reduced cost (lowest index on ties) until
    ``bland_after`` iterations, then Bland's lowest-index rule. Leaving
    row: minimum ratio, ties broken by smallest basis column, which
    makes the Bland phase cycle-free. Returns (status, detail, iters)
    with status 0 = optimal, 1 = unbounded (detail = entering column),
    2 = iteration cap hit.
    """
    m = T.shape[0] - 1
    iters = 0
    while iters < max_iters:
        col = -1
        if iters < bland_after:
            best = -tol
            for j in range(ncols):
                v = T[0, j]
                if v < best:
                    best = v
                    col = j
        else:
            for j in range(ncols):
                if T[0, j] < -tol:
                    col = j
                    break
        if col < 0:
            return 0, -1, iters

        row = -1
        best_ratio = np.inf
        best_basis = -1
        for i in range(1, m + 1):
            a = T[i, col]
            if a > tol:
                r = T[i, ncols] / a
                if row < 0 or r < best_ratio or (r == best_ratio and basis[i - 1] < best_basis):
                    row = i
                    best_ratio = r
                    best_basis = basis[i - 1]
        if row < 0:
            return 1, col, iters

        inv = 1.0 / T[row, col]
        for j in range(ncols + 1):
            T[row, j] *= inv
        T[row, col] = 1.0
        for i in range(m + 1):
            if i != row:
                f = T[i, col]
                if f != 0.0:
                    for j in range(ncols + 1):
                        T[i, j] -= f * T[row, j]
                    T[i, col] = 0.0
        basis[row - 1] = col
        iters += 1
    return 2, -1, iters


def _pivot_loop_numpy(T, basis, ncols, tol, bland_after, max_iters):
    """Vectorized twin of the compiled pivot loop; same rules exactly."""
    m = T.shape[0] - 1
    iters = 0
    while iters < max_iters:
        obj = T[0, :ncols]
        if iters < bland_after:
            col = int(np.argmin(obj)) if ncols else -1
            if col < 0 or obj[col] >= -tol:
                return 0, -1, iters
        else:
            neg = np.nonzero(obj < -tol)[0]
            if neg.size == 0:
                return 0, -1, iters
            col = int(neg[0])

        colv = T[1:, col]
        pos = colv > tol
        if not pos.any():
            return 1, col, iters
        ratios = np.full(m, np.inf)
        ratios[pos] = T[1:, ncols][pos] / colv[pos]
        best = ratios.min()
        ties = np.nonzero(ratios == best)[0]
        row = 1 + int(ties[np.argmin(basis[ties])])

        T[row] *= 1.0 / T[row, col]
        T[row, col] = 1.0
        f = T[:, col].copy()
        f[row] = 0.0
        T -= np.outer(f, T[row])
        T[:, col] = 0.0
        T[row, col] = 1.0
        basis[row - 1] = col
        iters += 1
    return 2, -1, iters


def _accumulate_paths_impl(src, dst, mass, m, right, down):
    """Turn transport-plan moves into edge flows along L-shaped paths.

    Each move goes horizontally along the source row first, then
    vertically along the target column; rightward/downward steps add to
    the edge values, leftward/upward steps subtract.
    """
    for e in range(src.shape[0]):
        w = mass[e]
        i = src[e] // m
        j = src[e] - i * m
        k = dst[e] // m
        l = dst[e] - k * m
        if l >= j:
            for step in range(j, l):
                right[i, step] += w
        else:
            for step in range(l, j):
                right[i, step] -= w
        if k >= i:
            for step in range(i, k):
                down[step, l] += w
        else:
            for step in range(k, i):
                down[step, l] -= w


def _accumulate_paths_numpy(src, dst, mass, m, right, down):
    """Slice-based twin of the compiled path accumulation."""
    for e in range(src.shape[0]):
        w = mass[e]
        i, j = divmod(int(src[e]), m)
        k, l = divmod(int(dst[e]), m)
        if l >= j:
            right[i, j:l] += w
        else:
            right[i, l:j] -= w
        if k >= i:
            down[i:k, l] += w
        else:
            down[k:i, l] -= w


if HAVE_NUMBA:
    _pivot_loop_numba = njit(cache=True)(_pivot_loop_impl)
    _accumulate_paths_numba = njit(cache=True)(_accumulate_paths_impl)

if USING_NUMBA:
    pivot_loop = _pivot_loop_numba
    accumulate_paths = _accumulate_paths_numba
else:
    pivot_loop = _pivot_loop_numpy
    accumulate_paths = _accumulate_paths_numpy
