"""Minimum-cost bipartite matching between predicted masks and ground-truth segments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MatchResult:
    pairs: list                      # (query index, gt index), sorted by query
    unmatched: list = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def query_to_gt(self):
        return dict(self.pairs)


def _solve_rows_le_cols(cost):
    """Shortest augmenting path Kuhn-Munkres with potentials; needs n <= m.

    Returns ``col_of_row`` (length n).
    """
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)      # p[j]: row (1-based) matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian_match(cost) -> MatchResult:
    """Injective assignment of ground-truth columns to query rows at minimum total cost.

    ``cost`` is (N_m, G).  With G <= N_m every gt segment is matched and the
    remaining queries are reported unmatched (they train towards no-object).
    With G > N_m every query is matched and the surplus gt segments are dropped.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    nq, ng = cost.shape
    if nq == 0 or ng == 0:
        return MatchResult([], list(range(nq)), 0.0)
    if ng <= nq:
        row_of_col = _solve_rows_le_cols(cost.T)
        pairs = sorted((int(r), int(g)) for g, r in enumerate(row_of_col))
    else:
        col_of_row = _solve_rows_le_cols(cost)
        pairs = [(int(q), int(g)) for q, g in enumerate(col_of_row)]
    matched = {q for q, _ in pairs}
    total = float(sum(cost[q, g] for q, g in pairs))
    return MatchResult(pairs, [q for q in range(nq) if q not in matched], total)
