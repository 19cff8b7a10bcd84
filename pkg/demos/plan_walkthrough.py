"""Walk through the planners on the full-size Nyx hierarchy.

Prints the expected completion time for every parity count at three loss
rates, then the minimum-error plans under deadlines near those optima.

    python demos/plan_walkthrough.py
"""

from __future__ import annotations

from ectransfer import model, reliability as rel

N, S, T, R = 32, 4096, 0.01, 19144.0
LOSS_RATES = (19.0, 383.0, 957.0)


def main() -> None:
    h = model.nyx_hierarchy()
    total = sum(h.sizes)
    print(f"hierarchy: {len(h.sizes)} levels, {total / 2**30:.2f} GiB, n={N}, s={S}, t={T}, r={R:g}")
    print()
    print("expected total time (s) by parity count m")
    print("   m " + "".join(f"{f'lambda={lam:g}':>16}" for lam in LOSS_RATES))
    for m in range(N // 2 + 1):
        row = [rel.expected_total_time(total, N, m, S, T, R, lam).expected_total_s for lam in LOSS_RATES]
        print(f"{m:4d} " + "".join(f"{v:16.2f}" for v in row))

    print()
    best = {}
    for lam in LOSS_RATES:
        m, est = rel.optimize_parity_for_min_time(total, N, S, T, R, lam)
        best[lam] = est.expected_total_s
        print(f"lambda={lam:g}: best m={m}, {est.expected_total_s:.2f}s, "
              f"per-group failure probability {est.p_unrecoverable:.3g}")

    # with the deadline set to the error-bound optimum, how much accuracy
    # does a single pass of all four levels buy?
    print()
    for lam in LOSS_RATES:
        plan = rel.optimize_parity_for_min_error(h, N, S, T, R, lam, best[lam], levels=h.num_levels)
        est = rel.expected_error(h, plan.plan.levels_sent, plan.plan.parity_per_level, N, S, T, R, lam)
        dist = ", ".join(f"{b:g}: {p:.3f}" for b, p in est.outcome_probabilities)
        print(f"lambda={lam:g}, deadline {best[lam]:.2f}s -> parity {list(plan.plan.parity_per_level)}, "
              f"expected error {plan.expected_error:.3g}")
        print(f"    achieved-bound distribution {{{dist}}}")


if __name__ == "__main__":
    main()
