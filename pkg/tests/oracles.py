"""Independent reference implementations used only by the tests.

None of these import the code under test; they restate each quantity from
first principles in the most literal way available.
"""

from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np


def placement_mc(n: int, m: int, t: float, r: float, lam: float, trials: int, seed: int = 0,
                 chunk: int = 200_000) -> float:
    """Monte-Carlo estimate of P(more than m of one FTG's n fragments lost).

    Poisson(lam * (t + (n-1)/r)) losses land uniformly without replacement on
    the u = floor(r t + n - 1) fragments in flight, the FTG being n of them.
    The count landing on the FTG is drawn by sequential sampling.
    """
    rng = np.random.default_rng(seed)
    u = max(int(math.floor(r * t + n - 1 + 1e-9)), n)
    mean = lam * (t + (n - 1) / r)
    bad = 0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        j = np.minimum(rng.poisson(mean, size), u)
        hits = rng.hypergeometric(n, u - n, np.maximum(j, 1)) * (j > 0)
        bad += int(np.count_nonzero(hits > m))
        done += size
    return bad / trials


def placement_exact_bruteforce(n: int, m: int, u: int, mean: float, jmax: int | None = None) -> float:
    """Same quantity by literal counting of position subsets (tiny u only)."""
    jmax = u if jmax is None else jmax
    total = mpmath.mpf(0)
    for j in range(m + 1, jmax + 1):
        pj = mpmath.exp(-mean) * mpmath.mpf(mean) ** j / mpmath.factorial(j)
        bad = sum(1 for pos in itertools.combinations(range(u), j) if sum(1 for x in pos if x < n) > m)
        total += pj * mpmath.mpf(bad) / mpmath.binomial(u, j)
    return float(total)


def poisson_tail_mp(m: int, mean: float, dps: int = 50) -> float:
    """P(X > m) for X ~ Poisson(mean) with arbitrary precision."""
    with mpmath.workdps(dps):
        mean = mpmath.mpf(mean)
        head = mpmath.fsum(mpmath.exp(-mean) * mean**k / mpmath.factorial(k) for k in range(m + 1))
        return float(1 - head)


def expected_error_by_outcomes(success: list[float], bounds_after: list[float]) -> float:
    """Expected error by enumerating every success/failure pattern of the levels.

    ``bounds_after[i]`` is the error with the first ``i`` levels intact
    (``bounds_after[0]`` for none), and a pattern's error is set by its first
    failed level.
    """
    total = 0.0
    for pattern in itertools.product((True, False), repeat=len(success)):
        prob = 1.0
        for ok, q in zip(pattern, success):
            prob *= q if ok else 1.0 - q
        first_fail = pattern.index(False) if False in pattern else len(success)
        total += prob * bounds_after[first_fail]
    return total


def ftgs(size: int, n: int, m: int, s: int) -> int:
    return math.ceil(size / ((n - m) * s))


def min_error_bruteforce(sizes, bounds_after, n, s, t, r, budget, p_of_m):
    """Best parity vector by scanning every vector; ties prefer less parity.

    ``p_of_m`` maps m to the per-FTG loss probability.
    """
    best = None
    M = n // 2
    for parity in itertools.product(range(M + 1), repeat=len(sizes)):
        count = sum(ftgs(S, n, m, s) for S, m in zip(sizes, parity))
        if t + (n * count - 1) / r > budget + 1e-12:
            continue
        succ = [(1.0 - p_of_m[m]) ** ftgs(S, n, m, s) for S, m in zip(sizes, parity)]
        value = expected_error_by_outcomes(succ, bounds_after)
        key = (value, sum(parity))
        if best is None or key[0] < best[0][0] * (1 - 1e-12) or (
            math.isclose(key[0], best[0][0], rel_tol=1e-12) and key[1] < best[0][1]
        ):
            best = (key, parity)
    return None if best is None else (best[0][0], best[1])
