"""Candidate/reference matching and the detector training objective.

The matching solves a rectangular assignment problem (every reference gets
exactly one candidate) with a large localization weight; the loss and its
gradients are then evaluated on that fixed matching with a smaller weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONF_EPS = 1e-7


@dataclass(frozen=True)
class MatchLossConfig:
    alpha_match: float = 1000.0
    alpha_grad: float = 100.0

    def __post_init__(self):
        if self.alpha_match <= 0 or self.alpha_grad <= 0:
            raise ValueError("alpha values must be positive")


@dataclass
class Assignment:
    pairs: list  # (candidate n, reference m), sorted by m
    matched: np.ndarray  # bool per candidate

    def total(self, cost) -> float:
        return float(sum(cost[n, m] for n, m in self.pairs))


def hungarian_assign(cost) -> Assignment:
    """Minimum-cost assignment of all M columns to distinct rows of an N x M cost.

    Shortest augmenting path with potentials (Kuhn-Munkres), O(M^2 N).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_rows < n_cols:
        raise ValueError(f"need at least as many candidates as references ({n_rows} < {n_cols})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    matched = np.zeros(n_rows, dtype=bool)
    if n_cols == 0:
        return Assignment([], matched)

    # work on the transpose: references are "workers" (<= candidates as "jobs")
    a = cost.T
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # job j -> worker (1-based), 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted((int(j - 1), int(owner[j] - 1)) for j in range(1, m + 1) if owner[j])
    pairs.sort(key=lambda p: p[1])
    for r, _ in pairs:
        matched[r] = True
    return Assignment(pairs, matched)


def matching_cost(coords, conf, refs, alpha):
    """Pairwise cost of matching candidate n to reference m.

    The +log(1-c) term makes a match directly comparable to leaving the
    candidate unmatched.
    """
    c = np.clip(conf, CONF_EPS, 1 - CONF_EPS)
    d2 = ((coords[:, None, :] - refs[None, :, :]) ** 2).sum(-1)
    return alpha * d2 + (-np.log(c) + np.log1p(-c))[:, None]


def match_and_loss(coords, conf, refs, config: MatchLossConfig = MatchLossConfig()):
    """Returns (loss, d_coords, d_conf, assignment).

    coords: (N, K) candidate coordinates, conf: (N,) confidences in (0, 1),
    refs: (M, K) reference coordinates with M <= N.
    """
    coords = np.asarray(coords, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, coords.shape[1])
    c = np.clip(conf, CONF_EPS, 1 - CONF_EPS)
    assignment = hungarian_assign(matching_cost(coords, c, refs, config.alpha_match))

    d_coords = np.zeros_like(coords)
    d_conf = 1.0 / (1.0 - c)
    unmatched = ~assignment.matched
    loss = float(-np.log1p(-c[unmatched]).sum())
    for n, m in assignment.pairs:
        diff = coords[n] - refs[m]
        loss += config.alpha_grad * float(diff @ diff) - float(np.log(c[n]))
        d_coords[n] = 2.0 * config.alpha_grad * diff
        d_conf[n] = -1.0 / c[n]
    return loss, d_coords, d_conf, assignment
