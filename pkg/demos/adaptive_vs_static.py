"""Compare the adaptive protocols with fixed parity under a switching loss rate.

Runs the thousandth-scale hierarchy through the simulator with the
three-state loss model, first with a guaranteed error bound (time is the
score), then under a deadline (achieved error is the score).

    python demos/adaptive_vs_static.py [SEEDS]
"""

from __future__ import annotations

import sys
from collections import Counter

import numpy as np

from ectransfer import model, reliability as rel
from ectransfer.model import NetworkParams
from ectransfer.sim import AdaptiveDeadline, AdaptiveErrorBound, LossModel, Scenario, StaticEC, TcpBaseline, run

TIME_SCALE = 20.0


def simulate(h, proto, seeds):
    return [run(Scenario(h, NetworkParams(), LossModel.hmm(), proto, s, time_scale=TIME_SCALE)) for s in seeds]


def main(count: int) -> None:
    h = model.nyx_mini_hierarchy()
    seeds = range(count)
    print(f"{count} seeds, loss rate switching between 19, 383 and 957 per second")
    print()

    adaptive = simulate(h, AdaptiveErrorBound(h.error_bounds[-1]), seeds)
    times = {"adaptive": np.array([r.total_time_s for r in adaptive])}
    for m in (0, 2, 3, 4, 6, 10):
        times[f"static m={m}"] = np.array([r.total_time_s for r in simulate(h, StaticEC((m,)), seeds)])
    times["tcp"] = np.array([r.total_time_s for r in simulate(h, TcpBaseline(), seeds)])
    print("error-bound mode, total time")
    for name, t in times.items():
        print(f"  {name:14s} mean {t.mean() * 1000:8.2f} ms   sd {t.std() * 1000:6.2f} ms")
    replans = np.mean([len(r.plan_trace) - 1 for r in adaptive])
    print(f"  adaptive runs changed parity {replans:.1f} times on average")

    tau = float(times["adaptive"].mean())
    print()
    print(f"deadline mode, tau = {tau * 1000:.2f} ms, levels intact out of {h.num_levels}")
    rows = {"adaptive": simulate(h, AdaptiveDeadline(tau), seeds)}
    for lam in (19.0, 383.0, 957.0):
        plan = rel.optimize_parity_for_min_error(h, 32, 4096, 0.01, 19144.0, lam, tau, levels=4)
        vec = tuple(plan.plan.parity_per_level)
        rows[f"static {list(vec)}"] = simulate(h, StaticEC(vec, deadline_s=tau), seeds)
    for name, reps in rows.items():
        hist = Counter(r.levels_intact for r in reps)
        met = sum(bool(r.deadline_met) for r in reps)
        print(f"  {name:20s} " + " ".join(f"{k}:{hist.get(k, 0):3d}" for k in range(h.num_levels + 1))
              + f"   on time {met}/{count}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
