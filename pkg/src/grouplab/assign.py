"""Assignment solvers over an (N queries x M ground truths) cost matrix."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BRUTE_FORCE_MAX_GTS = 8


@dataclass
class Assignment:
    """``gt_to_query[j]`` is the query matched to ground truth ``j``."""

    gt_to_query: np.ndarray
    total_cost: float

    def __len__(self):
        return len(self.gt_to_query)


@dataclass
class MultiAssignment:
    """``gt_to_queries[j]`` lists every query assigned to ground truth ``j``."""

    gt_to_queries: list
    total_cost: float

    def queries(self):
        return [q for qs in self.gt_to_queries for q in qs]


def _check(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n, m = cost.shape
    if m > n:
        raise ValueError(f"infeasible assignment: {m} ground truths but only {n} queries")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    return cost


def hungarian(cost):
    """Exact minimum-cost injection of ground truths (columns) into queries (rows).

    Shortest-augmenting-path Hungarian method with dual potentials, O(M^2 N).
    Rectangular problems are solved directly; each ground truth is inserted
    in turn. Among equal reduced costs the lowest query index wins.
    """
    cost = _check(cost)
    n_q, n_gt = cost.shape
    if n_gt == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    c = cost.T  # rows: ground truths, columns: queries
    u = np.zeros(n_gt + 1)
    v = np.zeros(n_q + 1)
    owner = np.zeros(n_q + 1, dtype=np.int64)  # owner[j]: gt (1-based) holding query j, 0 = free
    way = np.zeros(n_q + 1, dtype=np.int64)
    for i in range(1, n_gt + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n_q + 1, np.inf)
        used = np.zeros(n_q + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    gt_to_query = np.zeros(n_gt, dtype=np.int64)
    for j in range(1, n_q + 1):
        if owner[j]:
            gt_to_query[owner[j] - 1] = j - 1
    total = float(cost[gt_to_query, np.arange(n_gt)].sum())
    return Assignment(gt_to_query, total)


@lru_cache(maxsize=None)
def _injections(n_q, n_gt):
    perms = np.array(list(itertools.permutations(range(n_q), n_gt)), dtype=np.int16)
    return perms.reshape(-1, n_gt)


def brute_force_assign(cost):
    """Exact minimum by enumerating every injection; test oracle for :func:`hungarian`."""
    cost = _check(cost)
    n_q, n_gt = cost.shape
    if n_gt > BRUTE_FORCE_MAX_GTS:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX_GTS} ground truths, got {n_gt}")
    if n_gt == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    perms = _injections(n_q, n_gt)
    totals = cost[perms, np.arange(n_gt)].sum(axis=1)
    best = perms[int(np.argmin(totals))].astype(np.int64)
    return Assignment(best, float(cost[best, np.arange(n_gt)].sum()))


def split_groups(cost, num_groups):
    """Split a (K*N, M) matrix into K row blocks of N queries."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[0] % num_groups:
        raise ValueError(f"{cost.shape[0]} queries do not split into {num_groups} groups")
    return np.split(cost, num_groups, axis=0)


def group_wise_assign(costs):
    """Independent one-to-one matching inside each group; query indices are group-local."""
    out = []
    for g, cost in enumerate(costs):
        try:
            out.append(hungarian(cost))
        except ValueError as exc:
            raise ValueError(f"group {g}: {exc}") from None
    return out


def one_to_many_assign(cost, multiplicity):
    """Rank-greedy top-k: visit (query, gt) pairs by ascending cost, each query used once,
    each ground truth filled up to ``multiplicity`` queries. Ties resolve by flat index."""
    if multiplicity < 1:
        raise ValueError(f"multiplicity must be >= 1, got {multiplicity}")
    cost = np.asarray(cost, dtype=np.float64)
    n_q, n_gt = cost.shape
    if n_q < multiplicity * n_gt:
        raise ValueError(f"insufficient queries: {n_q} < {multiplicity} x {n_gt}")
    picked = [[] for _ in range(n_gt)]
    taken = np.zeros(n_q, dtype=bool)
    remaining = multiplicity * n_gt
    total = 0.0
    for flat in np.argsort(cost, axis=None, kind="stable"):
        if not remaining:
            break
        q, j = divmod(int(flat), n_gt)
        if taken[q] or len(picked[j]) == multiplicity:
            continue
        taken[q] = True
        picked[j].append(q)
        total += cost[q, j]
        remaining -= 1
    return MultiAssignment(picked, float(total))
