"""Error metrics, sign recovery, and sensitivity diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .synth import SparseCode

__all__ = [
    "EmptyConditioningError",
    "MatchResult",
    "empirical_cond_variance",
    "inf_dist",
    "inf_dist_equiv",
    "kappa_inf_estimate",
    "sign_recovery_rate",
]


class EmptyConditioningError(ValueError):
    """No sample has the requested coordinate in its true support."""


@dataclass(frozen=True)
class MatchResult:
    """Alignment of B to A: column j of A is matched to ``signs[j] * B[:, permutation[j]]``."""

    distance: float
    permutation: np.ndarray
    signs: np.ndarray


def _same_shape(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    return A, B


def inf_dist(A, B) -> float:
    """Largest entrywise absolute difference."""
    A, B = _same_shape(A, B)
    if A.size == 0:
        return 0.0
    return float(np.abs(A - B).max())


def _pair_costs(A, B):
    """cost[j, i] = min over z in {+1, -1} of ||A_j - z B_i||_inf, and the best z."""
    plus = np.abs(A[:, :, None] - B[:, None, :]).max(axis=0)
    minus = np.abs(A[:, :, None] + B[:, None, :]).max(axis=0)
    signs = np.where(minus < plus, -1.0, 1.0)
    return np.minimum(plus, minus), signs


def _has_perfect_matching(allowed: np.ndarray) -> bool:
    if not allowed.shape[0]:
        return True
    match = maximum_bipartite_matching(csr_matrix(allowed.astype(np.int8)), perm_type="column")
    return bool(np.all(match >= 0))


def inf_dist_equiv(A, B) -> MatchResult:
    """Infinity-norm distance from A to the closest column permutation and sign flip of B.

    The objective is the largest per-column cost, so this is a bottleneck
    assignment: the smallest cost level admitting a perfect matching is found
    by bisection over the sorted distinct costs, and among the matchings at
    that level the lexicographically smallest permutation is built greedily.
    """
    A, B = _same_shape(A, B)
    r = A.shape[1]
    if r == 0:
        return MatchResult(0.0, np.zeros(0, dtype=np.int64), np.zeros(0))
    cost, signs = _pair_costs(A, B)

    # a min-sum assignment gives an upper bound on the bottleneck level
    rows, cols = linear_sum_assignment(cost)
    hi_val = cost[rows, cols].max()
    levels = np.unique(cost[cost <= hi_val])
    lo, hi = 0, levels.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _has_perfect_matching(cost <= levels[mid]):
            hi = mid
        else:
            lo = mid + 1
    level = levels[lo]
    allowed = cost <= level

    perm = np.empty(r, dtype=np.int64)
    free = np.ones(r, dtype=bool)
    for j in range(r):
        for i in np.flatnonzero(allowed[j] & free):
            rest = allowed[j + 1:][:, free].copy()
            rest[:, np.flatnonzero(free) == i] = False
            if _has_perfect_matching(rest):
                perm[j] = i
                free[i] = False
                break
    sgn = signs[np.arange(r), perm]
    return MatchResult(float(level), perm, sgn)


def _sign_key(code: SparseCode):
    nz = code.values != 0
    return code.support[nz].tolist(), np.sign(code.values[nz]).tolist()


def sign_recovery_rate(estimates: Sequence[SparseCode], truths: Sequence[SparseCode]) -> float:
    """Fraction of samples whose full sign pattern matches the truth."""
    if len(estimates) != len(truths):
        raise ValueError(f"length mismatch: {len(estimates)} estimates vs {len(truths)} truths")
    if not truths:
        return 1.0
    hits = sum(_sign_key(e) == _sign_key(t) for e, t in zip(estimates, truths))
    return hits / len(truths)


def empirical_cond_variance(estimates: Sequence[SparseCode], truths: Sequence[SparseCode], j: int) -> float:
    """Mean of x_j^2 over the samples whose true code has j in its support."""
    if len(estimates) != len(truths):
        raise ValueError(f"length mismatch: {len(estimates)} estimates vs {len(truths)} truths")
    vals = []
    for est, tru in zip(estimates, truths):
        if np.any(tru.support == j):
            hit = np.flatnonzero(est.support == j)
            vals.append(est.values[hit[0]] ** 2 if hit.size else 0.0)
    if not vals:
        raise EmptyConditioningError(f"no sample has coordinate {j} in its true support")
    return float(np.mean(vals))


def cond_second_moments(estimates, truths, r: int):
    """Per-coordinate (mean of x_j^2, its Monte-Carlo half-width, count) given x*_j != 0.

    The half-width is three standard errors of the mean; coordinates never in
    a true support get NaN.
    """
    n = len(truths)
    X = np.zeros((r, n))
    mask = np.zeros((r, n), dtype=bool)
    for k, (est, tru) in enumerate(zip(estimates, truths)):
        X[est.support, k] = est.values
        mask[tru.support, k] = True
    sq = np.where(mask, X * X, 0.0)
    cnt = mask.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sq.sum(axis=1) / cnt
        var = np.where(mask, (X * X - mean[:, None]) ** 2, 0.0).sum(axis=1) / np.maximum(cnt - 1, 1)
        half = 3.0 * np.sqrt(var / cnt)
    mean[cnt == 0] = np.nan
    half[cnt == 0] = np.nan
    return mean, half, cnt


def _cone_value(G, delta, g):
    return g * np.abs(G @ delta).max()


def _in_cone(delta, J_mask, u):
    return np.abs(delta[~J_mask]).sum() <= u * np.abs(delta[J_mask]).sum() * (1 + 1e-12)


def kappa_inf_estimate(A, s: int, u: float, trials: int = 200, seed: int = 0,
                       gram_scale: float | None = None, refine_passes: int = 3) -> float:
    """Stochastic upper estimate of the l_inf-sensitivity kappa_inf(s, u).

    kappa_inf(s, u) is the minimum of g ||A^T A delta||_inf over supports
    |J| <= s and directions delta in the cone
    {||delta_Jc||_1 <= u ||delta_J||_1} with ||delta||_inf = 1. Each trial
    draws a support and a cone direction, then runs a few passes of
    coordinate descent (halving steps, rescaled to ||delta||_inf = 1, kept in
    the cone). The result is the smallest value seen, an upper bound on the
    true minimum that is exact only when a trial reaches the minimizer.
    Trial ``i`` always uses the same random stream, so more trials can only
    lower the estimate.
    """
    A = np.asarray(A, dtype=float)
    d, r = A.shape
    if not 1 <= s <= r:
        raise ValueError(f"need 1 <= s <= r, got s={s}, r={r}")
    if not u > 0:
        raise ValueError("u must be > 0")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    g = 1.0 / d if gram_scale is None else gram_scale
    G = A.T @ A
    best = math.inf
    for i in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        J = rng.choice(r, size=s, replace=False)
        J_mask = np.zeros(r, dtype=bool)
        J_mask[J] = True
        delta = np.zeros(r)
        delta[J] = rng.standard_normal(s)
        if r > s:
            off = rng.standard_normal(r - s)
            budget = rng.uniform() * u * np.abs(delta[J]).sum()
            delta[~J_mask] = off / np.abs(off).sum() * budget
        delta /= np.abs(delta).max()
        val = _cone_value(G, delta, g)
        step = 0.5
        for _ in range(refine_passes):
            for k in range(r):
                for sgn in (1.0, -1.0):
                    cand = delta.copy()
                    cand[k] += sgn * step
                    top = np.abs(cand).max()
                    if top == 0:
                        continue
                    cand /= top
                    if not _in_cone(cand, J_mask, u):
                        continue
                    cv = _cone_value(G, cand, g)
                    if cv < val:
                        delta, val = cand, cv
            step *= 0.5
        best = min(best, val)
    return float(best)
