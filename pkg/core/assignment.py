# core/assignment.py
"""
Minimum-cost bipartite assignment (Hungarian method with potentials), O(n^2 m).
"""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .errors import ContractError


def _solve_wide(cost: np.ndarray) -> np.ndarray:
    """
    rows <= cols; returns col index per row.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)      # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assignment = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    return assignment


def hungarian(cost) -> Tuple[List[Tuple[int, int]], float]:
    """
    Optimal one-to-one matching of the smaller side of a rectangular cost matrix.

    Returns ([(row, col), ...] sorted by row, total cost).
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ContractError(f"cost matrix must be non-empty 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix has non-finite entries")

    if c.shape[0] <= c.shape[1]:
        cols = _solve_wide(c)
        pairs = [(i, int(j)) for i, j in enumerate(cols)]
    else:
        rows = _solve_wide(c.T)
        pairs = sorted((int(i), j) for j, i in enumerate(rows))
    total = float(sum(c[i, j] for i, j in pairs))
    return pairs, total
