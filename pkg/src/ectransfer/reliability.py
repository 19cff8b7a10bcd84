"""Loss probabilities, expected transfer time and expected error, and the two
redundancy optimizers built on them.

Every function works in fragments: ``n`` fragments per fault-tolerant group
(FTG), ``m`` of them parity, ``s`` bytes each, sent at ``r`` fragments/s over a
path with one-way latency ``t`` and ``lam`` lost packets/s.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import gammaln, pdtrc
from scipy.stats import poisson

from .model import (
    CodingPlan,
    HierarchySpec,
    ModelError,
    NetworkParams,
    check_parity,
    ftg_count,
)

LOW_LOSS = "low-loss"
HIGH_LOSS = "high-loss"

SERIES_TOL = 1e-12
SERIES_MAX_TERMS = 200
ENUMERATION_LIMIT = 10**6
MAX_SWEEPS = 50


class DivergenceError(ArithmeticError):
    """Every FTG is lost with certainty, so retransmission never finishes."""


class DeadlineInfeasibleError(ModelError):
    """Not even level 1 without parity fits in the deadline."""


@dataclass(frozen=True)
class RecoveryProbability:
    value: float
    regime: str

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class TimeEstimate:
    expected_total_s: float
    truncation_terms: int
    ftgs: int = 0
    p_unrecoverable: float = 0.0


@dataclass(frozen=True)
class ErrorEstimate:
    expected_error: float
    outcome_probabilities: tuple[tuple[float, float], ...]

    def probability_of(self, bound: float) -> float:
        return sum(p for b, p in self.outcome_probabilities if b == bound)


def fragments_in_flight(r: float, t: float, n: int) -> int:
    """Fragments sent while one FTG is in transit, ``r*t + n - 1`` floored."""
    return int(math.floor(r * t + n - 1 + 1e-9))


def _log_binom(a, b):
    return gammaln(a + 1.0) - gammaln(b + 1.0) - gammaln(a - b + 1.0)


def _check_n_m(n: int, m: int) -> None:
    if n < 2:
        raise ModelError("group size must be >= 2")
    check_parity(n, m)


def p_unrecoverable_low(n: int, m: int, t: float, r: float, lam: float) -> RecoveryProbability:
    """Hypergeometric placement of Poisson-many losses among in-flight fragments."""
    _check_n_m(n, m)
    if lam < 0:
        raise ModelError("loss rate must be non-negative")
    if lam == 0:
        return RecoveryProbability(0.0, LOW_LOSS)
    u = max(fragments_in_flight(r, t, n), n)
    mean = lam * (t + (n - 1) / r)
    j = np.arange(m + 1, u + 1, dtype=float)[:, None]
    w = np.arange(m + 1, n + 1, dtype=float)[None, :]
    valid = (w <= j) & (j - w <= u - n)
    jw = np.where(valid, j - w, 0.0)
    log_cond = _log_binom(n, w) + _log_binom(u - n, jw) - _log_binom(u, j)
    cond = np.where(valid, np.exp(np.where(valid, log_cond, 0.0)), 0.0).sum(axis=1)
    pj = np.exp(poisson.logpmf(j[:, 0], mean))
    value = float(np.clip(np.sum(cond * pj), 0.0, 1.0))
    return RecoveryProbability(value, LOW_LOSS)


def p_unrecoverable_high(n: int, m: int, r: float, lam: float) -> RecoveryProbability:
    """Poisson tail of losses landing in one FTG: P(more than m of n lost)."""
    _check_n_m(n, m)
    if lam < 0:
        raise ModelError("loss rate must be non-negative")
    mean = lam * n / r
    value = float(pdtrc(m, mean)) if mean > 0 else 0.0
    return RecoveryProbability(min(max(value, 0.0), 1.0), HIGH_LOSS)


def loss_regime(n: int, r: float, lam: float) -> str:
    return HIGH_LOSS if lam * n / r > 1 else LOW_LOSS


@lru_cache(maxsize=65536)
def p_unrecoverable(n: int, m: int, t: float, r: float, lam: float) -> RecoveryProbability:
    if loss_regime(n, r, lam) == HIGH_LOSS:
        return p_unrecoverable_high(n, m, r, lam)
    return p_unrecoverable_low(n, m, t, r, lam)


def _p_table(n: int, t: float, r: float, lam: float) -> np.ndarray:
    return np.array([p_unrecoverable(n, m, t, r, lam).value for m in range(n // 2 + 1)])


def expected_total_time(
    total_size: int, n: int, m: int, s: int, t: float, r: float, lam: float
) -> TimeEstimate:
    """Initial transmission plus the expected passive-retransmission rounds."""
    _check_n_m(n, m)
    N = ftg_count(total_size, n, m, s)
    if N < 1:
        raise ModelError("total size must be positive")
    p = p_unrecoverable(n, m, t, r, lam).value
    if p >= 1.0:
        raise DivergenceError(f"p = 1 for n={n}, m={m}, lam={lam}: retransmission never succeeds")
    total = t + (n * N - 1) / r
    terms = 0
    if p > 0:
        log_keep = math.log1p(-p)
        for i in range(1, SERIES_MAX_TERMS + 1):
            factor = -math.expm1(N * p ** (i - 1) * log_keep)
            if factor < SERIES_TOL:
                break
            total += factor * (t + (n * N * p**i - 1) / r)
            terms += 1
    return TimeEstimate(total, terms, N, p)


def optimize_parity_for_min_time(
    total_size: int, n: int, s: int, t: float, r: float, lam: float
) -> tuple[int, TimeEstimate]:
    """Exhaustive scan over m = 0..n/2; ties go to the smaller m."""
    best_m, best = None, None
    for m in range(n // 2 + 1):
        try:
            est = expected_total_time(total_size, n, m, s, t, r, lam)
        except DivergenceError:
            continue
        if best is None or est.expected_total_s < best.expected_total_s:
            best_m, best = m, est
    if best is None:
        raise DivergenceError("every parity count diverges")
    return best_m, best


def transmission_time(
    sizes: Sequence[int], parity: Sequence[int], n: int, s: int, t: float, r: float
) -> float:
    """Single-pass time for sending the given levels, no retransmission."""
    if len(sizes) < len(parity):
        raise ModelError("more parity entries than levels")
    total = 0
    for S, m in zip(sizes, parity):
        _check_n_m(n, m)
        total += ftg_count(S, n, m, s)
    return t + (n * total - 1) / r


def feasible_level_counts(
    hierarchy: HierarchySpec, n: int, s: int, t: float, r: float, deadline: float
) -> list[int]:
    """Level counts whose parity-free transmission time fits in the deadline."""
    if deadline <= 0:
        raise ModelError("deadline must be positive")
    out = []
    for l in range(1, hierarchy.num_levels + 1):
        if transmission_time(hierarchy.sizes[:l], [0] * l, n, s, t, r) <= deadline:
            out.append(l)
    return out


def _level_success(S: int, n: int, m: int, s: int, p: float) -> float:
    N = ftg_count(S, n, m, s)
    if p >= 1.0:
        return 0.0
    return math.exp(N * math.log1p(-p))


def expected_error(
    hierarchy: HierarchySpec,
    levels: int,
    parity: Sequence[int],
    n: int,
    s: int,
    t: float,
    r: float,
    lam: float,
) -> ErrorEstimate:
    """Distribution of the achieved error bound when sending ``levels`` levels.

    Outcomes partition the sample space: level 1 lost (error 1), first ``i-1``
    levels intact and level ``i`` lost (error of level ``i-1``) for every
    ``i <= levels``, or everything intact.
    """
    if not 1 <= levels <= hierarchy.num_levels or len(parity) != levels:
        raise ModelError("parity vector must have one entry per level sent")
    bounds = [1.0] + hierarchy.error_bounds
    outcomes = []
    prefix = 1.0
    for i in range(levels):
        m = parity[i]
        _check_n_m(n, m)
        p = p_unrecoverable(n, m, t, r, lam).value
        ok = _level_success(hierarchy.sizes[i], n, m, s, p)
        outcomes.append((bounds[i], prefix * (1.0 - ok)))
        prefix *= ok
    outcomes.append((bounds[levels], prefix))
    value = sum(b * q for b, q in outcomes)
    return ErrorEstimate(value, tuple((b, q) for b, q in outcomes if q > 0.0))


def truncated_expected_error(
    hierarchy: HierarchySpec,
    levels: int,
    parity: Sequence[int],
    n: int,
    s: int,
    t: float,
    r: float,
    lam: float,
) -> float:
    """Expected error with the "first ``levels-1`` intact, last lost" outcome
    left unweighted, i.e. the middle sum stopping at ``levels - 1``.

    Kept so plans can be compared on the objective that truncated form
    minimizes. Its outcome weights do not sum to one.
    """
    est = expected_error(hierarchy, levels, parity, n, s, t, r, lam)
    if levels < 2:
        return est.expected_error
    prefix = 1.0
    for i in range(levels - 1):
        p = p_unrecoverable(n, parity[i], t, r, lam).value
        prefix *= _level_success(hierarchy.sizes[i], n, parity[i], s, p)
    p = p_unrecoverable(n, parity[-1], t, r, lam).value
    last_lost = prefix * (1.0 - _level_success(hierarchy.sizes[levels - 1], n, parity[-1], s, p))
    return est.expected_error - last_lost * hierarchy.bound_after(levels - 1)


# -- minimum-error parity search ------------------------------------------------


@dataclass(frozen=True)
class ParitySolution:
    parity: tuple[int, ...]
    expected_error: float
    transmission_time_s: float


class _MinErrorProblem:
    """Tables for one fixed set of levels: FTG counts and success odds per m."""

    def __init__(self, sizes, fail_bounds, final_bound, n, s, t, r, lam, budget_s):
        self.n, self.t, self.r = n, t, r
        self.M = n // 2
        self.fail_bounds = np.asarray(fail_bounds, dtype=float)
        self.final_bound = float(final_bound)
        ms = range(self.M + 1)
        self.ftgs = np.array([[ftg_count(S, n, m, s) for m in ms] for S in sizes], dtype=np.int64)
        p = _p_table(n, t, r, lam)
        with np.errstate(divide="ignore"):
            log_keep = np.log1p(-p)
        self.succ = np.exp(self.ftgs * log_keep[None, :])
        self.succ[:, p >= 1.0] = 0.0
        # sum of FTG counts allowed by the deadline, in exact integer form
        limit = ((budget_s - t) * r + 1) / n
        self.max_ftgs = math.floor(limit + 1e-9) if limit >= 0 else -1

    @property
    def levels(self) -> int:
        return self.ftgs.shape[0]

    def time_of(self, parity) -> float:
        total = sum(int(self.ftgs[j, m]) for j, m in enumerate(parity))
        return self.t + (self.n * total - 1) / self.r

    def feasible(self, parity) -> bool:
        return sum(int(self.ftgs[j, m]) for j, m in enumerate(parity)) <= self.max_ftgs

    def objective(self, parity) -> float:
        value, prefix = 0.0, 1.0
        for j, m in enumerate(parity):
            ok = self.succ[j, m]
            value += prefix * (1.0 - ok) * self.fail_bounds[j]
            prefix *= ok
        return value + prefix * self.final_bound

    def key(self, parity):
        return (self.objective(parity), sum(parity), tuple(parity))

    def solution(self, parity) -> ParitySolution:
        parity = tuple(int(m) for m in parity)
        return ParitySolution(parity, self.objective(parity), self.time_of(parity))

    def enumerate(self) -> ParitySolution | None:
        L, K = self.levels, self.M + 1
        total = np.zeros((), dtype=np.int64)
        value = np.zeros(())
        prefix = np.ones(())
        msum = np.zeros((), dtype=np.int64)
        for j in range(L):
            shape = (1,) * j + (K,)
            ftg = self.ftgs[j].reshape(shape)
            ok = self.succ[j].reshape(shape)
            total = total[..., None] + ftg
            value = value[..., None] + prefix[..., None] * (1.0 - ok) * self.fail_bounds[j]
            prefix = prefix[..., None] * ok
            msum = msum[..., None] + np.arange(K).reshape(shape)
        value = (value + prefix * self.final_bound).ravel()
        feasible = np.flatnonzero(total.ravel() <= self.max_ftgs)
        if feasible.size == 0:
            return None
        # row-major flat index order is lexicographic order of the m-vector
        order = np.lexsort((feasible, msum.ravel()[feasible], value[feasible]))
        best = int(feasible[order[0]])
        return self.solution(np.unravel_index(best, (K,) * L))

    def _repair(self, parity):
        parity = list(parity)
        while not self.feasible(parity):
            gains = [
                (self.ftgs[j, m] - self.ftgs[j, m - 1], j) for j, m in enumerate(parity) if m > 0
            ]
            if not gains:
                return None
            _, j = max(gains)
            parity[j] -= 1
        return parity

    def _best_move(self, parity, coords):
        best_key, best = self.key(parity), parity
        ranges = [range(self.M + 1)] * len(coords)
        for values in itertools.product(*ranges):
            cand = list(parity)
            for j, v in zip(coords, values):
                cand[j] = v
            if not self.feasible(cand):
                continue
            k = self.key(cand)
            if k < best_key:
                best_key, best = k, cand
        return best

    def frontier(self) -> ParitySolution | None:
        """Exact backward recursion over (FTGs used, objective) Pareto points.

        The objective of a prefix choice is increasing in the objective of the
        remaining suffix, so suffixes dominated in both cost and tie-break key
        can be dropped without losing the optimum.
        """
        # each point: (cost, (value, msum, vector))
        points = [(0, (self.final_bound, 0, ()))]
        for j in reversed(range(self.levels)):
            b = self.fail_bounds[j]
            merged = []
            zero_cost = int(self.ftgs[j + 1:, 0].sum())
            for m in range(self.M + 1):
                ok = self.succ[j, m]
                c0 = int(self.ftgs[j, m])
                if ok == 0.0:
                    # suffix is irrelevant, so the tie-break wants all zeros
                    if c0 + zero_cost <= self.max_ftgs:
                        zeros = (0,) * (self.levels - j - 1)
                        merged.append((c0 + zero_cost, (float(b), m, (m,) + zeros)))
                    continue
                for cost, (v, ms, vec) in points:
                    c = c0 + cost
                    if c > self.max_ftgs:
                        continue
                    merged.append((c, ((1.0 - ok) * b + ok * v, ms + m, (m,) + vec)))
            merged.sort()
            points, best_key = [], None
            for cost, key in merged:
                if best_key is None or key < best_key:
                    points.append((cost, key))
                    best_key = key
            if not points:
                return None
        return self.solution(min(points, key=lambda pt: pt[1])[1][2])

    def coordinate_descent(self) -> ParitySolution | None:
        L = self.levels
        starts = [[0] * L, [self.M] * L]
        blocks = [(j,) for j in range(L)]
        if L >= 2:
            blocks += list(itertools.combinations(range(L), 2))
        results = []
        for start in starts:
            parity = self._repair(start)
            if parity is None:
                continue
            for _ in range(MAX_SWEEPS):
                before = list(parity)
                for coords in blocks:
                    parity = self._best_move(parity, coords)
                if parity == before:
                    break
            results.append(parity)
        if not results:
            return None
        return self.solution(min(results, key=self.key))


def minimize_expected_error(
    sizes: Sequence[int],
    fail_bounds: Sequence[float],
    final_bound: float,
    n: int,
    s: int,
    t: float,
    r: float,
    lam: float,
    budget_s: float,
    method: str = "auto",
) -> ParitySolution | None:
    """Integer search over per-level parity counts under a time budget.

    ``fail_bounds[j]`` is the error left when level ``j`` is the first lost,
    ``final_bound`` the error when all arrive. Returns ``None`` when no vector
    fits in ``budget_s``. ``method`` is ``"auto"`` (enumeration while the grid
    has at most a million points, the exact frontier recursion beyond),
    ``"enumerate"``, ``"frontier"`` or ``"coordinate"``. Coordinate descent is
    a heuristic and can stall on budget-coupled plateaus.
    """
    if len(sizes) != len(fail_bounds) or not sizes:
        raise ModelError("one fail bound per level required")
    prob = _MinErrorProblem(sizes, fail_bounds, final_bound, n, s, t, r, lam, budget_s)
    if method == "auto":
        method = "enumerate" if (prob.M + 1) ** prob.levels <= ENUMERATION_LIMIT else "frontier"
    if method == "enumerate":
        return prob.enumerate()
    if method == "frontier":
        return prob.frontier()
    if method == "coordinate":
        return prob.coordinate_descent()
    raise ValueError(f"unknown method {method!r}")


def solve_parity_for_levels(
    hierarchy: HierarchySpec,
    levels: int,
    n: int,
    s: int,
    t: float,
    r: float,
    lam: float,
    deadline: float,
    method: str = "auto",
) -> ParitySolution | None:
    bounds = [1.0] + hierarchy.error_bounds
    return minimize_expected_error(
        hierarchy.sizes[:levels], bounds[:levels], bounds[levels], n, s, t, r, lam, deadline, method
    )


@dataclass(frozen=True)
class MinErrorPlan:
    plan: CodingPlan
    expected_error: float
    transmission_time_s: float
    candidates: tuple[tuple[int, ParitySolution | None], ...] = ()


def optimize_parity_for_min_error(
    hierarchy: HierarchySpec,
    n: int,
    s: int,
    t: float,
    r: float,
    lam: float,
    deadline: float,
    levels: int | None = None,
    method: str = "auto",
) -> MinErrorPlan:
    """Pick the level count and parity vector with the lowest expected error.

    ``levels`` pins the level count instead of searching every feasible one.
    """
    feasible = feasible_level_counts(hierarchy, n, s, t, r, deadline)
    if not feasible:
        bound = transmission_time(hierarchy.sizes[:1], [0], n, s, t, r)
        raise DeadlineInfeasibleError(
            f"deadline {deadline:g}s is below the parity-free time of level 1 ({bound:.6g}s)"
        )
    if levels is not None:
        if levels not in feasible:
            raise DeadlineInfeasibleError(f"{levels} levels do not fit in {deadline:g}s")
        feasible = [levels]
    best_l, best, tried = None, None, []
    for l in feasible:
        sol = solve_parity_for_levels(hierarchy, l, n, s, t, r, lam, deadline, method)
        tried.append((l, sol))
        if sol is None:
            continue
        if best is None or sol.expected_error < best.expected_error:
            best_l, best = l, sol
    params = NetworkParams(latency_s=t, link_rate=r, ec_rate=r, loss_rate=lam, fragment_size=s, group_size=n)
    plan = CodingPlan.build(hierarchy, best.parity, params)
    return MinErrorPlan(plan, best.expected_error, best.transmission_time_s, tuple(tried))


# -- NetworkParams conveniences -------------------------------------------------


def plan_min_time(hierarchy: HierarchySpec, levels: int, params: NetworkParams) -> tuple[int, TimeEstimate]:
    S = sum(hierarchy.sizes[:levels])
    return optimize_parity_for_min_time(
        S, params.group_size, params.fragment_size, params.latency_s, params.rate, params.loss_rate
    )


def plan_min_error(
    hierarchy: HierarchySpec, params: NetworkParams, deadline: float, levels: int | None = None
) -> MinErrorPlan:
    return optimize_parity_for_min_error(
        hierarchy,
        params.group_size,
        params.fragment_size,
        params.latency_s,
        params.rate,
        params.loss_rate,
        deadline,
        levels=levels,
    )
