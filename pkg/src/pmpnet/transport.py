"""Minimum-cost bijections between equal-size point sets.

``assign_exact`` is the Hungarian method with row/column potentials;
``assign_auction`` is Bertsekas' forward auction with epsilon scaling,
which is what training uses when an EMD term is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, SolverError


@dataclass(frozen=True)
class Assignment:
    mapping: np.ndarray  # mapping[i] = target index for source i
    total_cost: float
    epsilon: float = 0.0  # final auction epsilon; 0 for the exact solver

    def is_bijection(self) -> bool:
        return np.array_equal(np.sort(self.mapping), np.arange(len(self.mapping)))


def cost_matrix(source, target) -> np.ndarray:
    a = np.asarray(source, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ArgumentError(f"expected two (N, d) point sets, got {a.shape} and {b.shape}")
    if len(a) != len(b):
        raise ArgumentError(f"point counts differ: {len(a)} vs {len(b)}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijc,ijc->ij", diff, diff))


def _total(cost: np.ndarray, mapping: np.ndarray) -> float:
    return float(cost[np.arange(len(mapping)), mapping].sum())


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Row -> column mapping minimising total cost for a square matrix."""
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
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
    mapping = np.empty(n, dtype=np.int64)
    mapping[owner[1:] - 1] = np.arange(n)
    return mapping


def assign_exact(source, target) -> Assignment:
    cost = cost_matrix(source, target)
    if len(cost) > 512:
        raise ArgumentError(f"assign_exact supports at most 512 points, got {len(cost)}")
    if len(cost) == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    mapping = hungarian(cost)
    return Assignment(mapping, _total(cost, mapping))


def default_epsilons(max_cost: float) -> list[float]:
    """max/8, halved until the value drops below 1e-4 * max (that value included)."""
    eps = max_cost / 8.0
    out = [eps]
    while eps >= 1e-4 * max_cost:
        eps /= 2.0
        out.append(eps)
    return out


def _auction_round(benefit: np.ndarray, prices: np.ndarray, eps: float, cap: int) -> tuple[np.ndarray, int]:
    """One epsilon phase of Jacobi-style bidding; returns person -> object."""
    n = benefit.shape[0]
    owner_of = np.full(n, -1, dtype=np.int64)  # object -> person
    assigned = np.full(n, -1, dtype=np.int64)  # person -> object
    iters = 0
    while True:
        bidders = np.flatnonzero(assigned < 0)
        if bidders.size == 0:
            return assigned, iters
        iters += 1
        if iters > cap:
            raise SolverError(
                f"auction exceeded {cap} iterations at eps={eps:.3g} "
                f"with {bidders.size} of {n} persons unassigned")
        values = benefit[bidders] - prices
        if n == 1:
            best = np.zeros(1, dtype=np.int64)
            gain = np.full(1, eps)
        else:
            top2 = np.argpartition(-values, 1, axis=1)[:, :2]
            v_top = np.take_along_axis(values, top2, axis=1)
            first = np.argmax(v_top, axis=1)
            best = top2[np.arange(bidders.size), first]
            v1 = v_top[np.arange(bidders.size), first]
            v2 = v_top[np.arange(bidders.size), 1 - first]
            gain = v1 - v2 + eps
        bids = prices[best] + gain
        # highest bid per object wins; ties go to the lowest person index
        order = np.lexsort((bidders, -bids, best))
        obj_sorted = best[order]
        lead = np.ones(order.size, dtype=bool)
        lead[1:] = obj_sorted[1:] != obj_sorted[:-1]
        win = order[lead]
        objs = best[win]
        winners = bidders[win]
        losers = owner_of[objs]
        assigned[losers[losers >= 0]] = -1
        owner_of[objs] = winners
        assigned[winners] = objs
        prices[objs] = bids[win]


def assign_auction(source, target, epsilon_schedule=None) -> Assignment:
    """Approximate assignment by auction.

    ``epsilon_schedule`` is a sequence of epsilons, a single float for one
    unscaled phase, or None for the default halving schedule.  Prices carry
    over between phases.
    """
    cost = cost_matrix(source, target)
    n = len(cost)
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    max_cost = float(cost.max())
    if max_cost == 0.0:
        mapping = np.arange(n)
        return Assignment(mapping, 0.0)
    if epsilon_schedule is None:
        schedule = default_epsilons(max_cost)
    elif np.isscalar(epsilon_schedule):
        schedule = [float(epsilon_schedule)]
    else:
        schedule = [float(e) for e in epsilon_schedule]
    benefit = -cost
    prices = np.zeros(n)
    cap = 50 * n * len(schedule)
    mapping = None
    used = 0
    for eps in schedule:
        mapping, iters = _auction_round(benefit, prices, eps, cap - used)
        used += iters
    return Assignment(mapping, _total(cost, mapping), epsilon=schedule[-1])
