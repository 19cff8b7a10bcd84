from __future__ import annotations

import json
import math

import numpy as np
import pytest

from ectransfer import model, reliability as rel
from ectransfer.model import HierarchySpec, NetworkParams
from ectransfer.sim import (
    AdaptiveDeadline,
    AdaptiveErrorBound,
    LossModel,
    LossProcess,
    RateTrajectory,
    Scenario,
    ScenarioError,
    StaticEC,
    TcpBaseline,
    hmm_step,
    run,
    scenarios_from_dict,
)
from ectransfer.sim.engine import _streams

MINI = model.nyx_mini_hierarchy()
PARAMS = NetworkParams()
SMALL = HierarchySpec.from_lists([300_000, 600_000], [0.01, 0.001])


def scenario(protocol, loss=None, seed=0, hierarchy=MINI, **kw):
    return Scenario(hierarchy, PARAMS, loss or LossModel.static(0.0), protocol, seed, **kw)


def test_static_loss_fraction_matches_rate():
    r, lam = 19144.0, 383.0
    proc = LossProcess(RateTrajectory(LossModel.static(lam), np.random.default_rng(1)), np.random.default_rng(2), 1 / r)
    count = 2_000_000
    lost = 0
    for start in range(0, count, 100_000):
        lost += int(proc.mark(0.01 + np.arange(start, start + 100_000) / r).sum())
    # gaps are drawn from the posting instant, so back-to-back packets see the
    # full rate; sd of the count is about 0.5%
    assert lost == pytest.approx(lam / r * count, rel=0.015)


def test_mark_and_mark_one_agree():
    traj_a = RateTrajectory(LossModel.hmm(), np.random.default_rng(5), time_scale=100)
    traj_b = RateTrajectory(LossModel.hmm(), np.random.default_rng(5), time_scale=100)
    a = LossProcess(traj_a, np.random.default_rng(6), 1e-4)
    b = LossProcess(traj_b, np.random.default_rng(6), 1e-4)
    times = 0.01 + np.arange(50_000) * 1e-4
    vec = np.concatenate([a.mark(times[i : i + 333]) for i in range(0, times.size, 333)])
    one = np.array([b.mark_one(x) for x in times])
    assert np.array_equal(vec, one)
    assert vec.sum() > 0


def test_idle_gaps_do_not_accumulate_losses():
    proc = LossProcess(RateTrajectory(LossModel.static(1000.0), np.random.default_rng(0)), np.random.default_rng(0), 1e-4)
    # packets 10 s apart each see only their own 0.1 ms slot
    lost = proc.mark(np.arange(1, 2001) * 10.0)
    assert lost.sum() < 2000 * 0.5


def test_hmm_holding_and_transitions():
    rng = np.random.default_rng(11)
    lm = LossModel.hmm()
    holds, moves = [], []
    state = 0
    for _ in range(20_000):
        nxt, lam, hold = hmm_step(state, rng, lm, time_scale=10.0)
        assert nxt != state and lam >= 0
        holds.append(hold)
        moves.append(nxt)
        state = nxt
    assert np.mean(holds) == pytest.approx(1 / lm.transition_rate / 10.0, rel=0.03)
    assert lm.mean_rate() == pytest.approx((19 + 383 + 957) / 3)


def test_trajectory_cumulative_matches_segments():
    traj = RateTrajectory(LossModel.hmm(), np.random.default_rng(3), time_scale=50)
    segs = traj.segments_until(5.0)
    assert len(segs) > 3
    # piecewise-linear integral by hand
    want, edges = 0.0, [s for s, _ in segs] + [5.0]
    for (start, rate), end in zip(segs, edges[1:]):
        want += rate * (end - start)
    assert traj.mass_between(0.0, 5.0) == pytest.approx(want, rel=1e-12)
    assert traj.rate_at(segs[-1][0]) == segs[-1][1]


def test_lossless_static_time_is_transmission_time():
    for m in (0, 3, 16):
        rep = run(scenario(StaticEC((m,))))
        want = rel.transmission_time(MINI.sizes, [m] * 4, 32, 4096, 0.01, 19144.0)
        assert rep.total_time_s == pytest.approx(want, rel=1e-12)
        assert rep.retransmission_rounds == 0
        assert rep.packets_lost == 0


def test_lossless_tcp_is_pipelined():
    rep = run(scenario(TcpBaseline()))
    total = sum(-(-S // 4096) for S in MINI.sizes)
    assert rep.packets_sent == total
    assert rep.total_time_s == pytest.approx(0.01 + (total - 1) / 19144.0, rel=1e-9)


def test_tcp_time_grows_with_loss():
    means = []
    for lam in (19.0, 383.0, 957.0):
        means.append(np.mean([run(scenario(TcpBaseline(), LossModel.static(lam), seed=s)).total_time_s for s in range(4)]))
    assert means[0] < means[1] < means[2]


def test_drop_seqs_force_one_round():
    rep = run(scenario(StaticEC((0,)), drop_seqs={0}, hierarchy=SMALL))
    assert rep.retransmission_rounds == 1
    assert rep.ftgs_lost == 1
    assert rep.retransmitted_ftgs == ((1, 1, 0),)
    rep = run(scenario(StaticEC((1,)), drop_seqs={0}, hierarchy=SMALL))
    assert rep.retransmission_rounds == 0
    assert rep.data_fragments_recovered == 1


def test_determinism_and_seed_sensitivity():
    sc = scenario(AdaptiveErrorBound(1e-7), LossModel.hmm(), seed=42, time_scale=20)
    a, b = run(sc), run(sc)
    assert a == b and a.to_json() == b.to_json()
    assert run(sc.with_seed(43)) != a


def test_streams_are_independent_per_purpose():
    a = [g.random() for g in _streams(9)]
    assert len(set(a)) == 3


def test_initial_prior_plans_on_starting_rate():
    sc = scenario(AdaptiveErrorBound(1e-7), LossModel.hmm(), seed=7, time_scale=20, planning_loss_rate="initial")
    traj_rng, _, _ = _streams(7)
    lam0 = RateTrajectory(sc.loss, traj_rng, 20).rate_at(0.0)
    m0, _ = rel.optimize_parity_for_min_time(sum(MINI.sizes), 32, 4096, 0.01, 19144.0, lam0)
    assert run(sc).plan_trace[0] == (0.0, (m0,))


def test_planning_rate_options():
    sc = scenario(StaticEC((0,)), LossModel.hmm())
    assert sc.planning_rate() == pytest.approx(453.0)
    assert scenario(StaticEC((0,)), planning_loss_rate=12.0).planning_rate() == 12.0
    assert scenario(StaticEC((0,)), planning_loss_rate="initial").planning_rate(5.0) == 5.0
    with pytest.raises(ScenarioError):
        scenario(StaticEC((0,)), planning_loss_rate="initial").planning_rate()
    with pytest.raises(ScenarioError):
        scenario(StaticEC((0,)), planning_loss_rate="latest")


def test_adaptive_replans_under_hmm():
    rep = run(scenario(AdaptiveErrorBound(1e-7), LossModel.hmm(), seed=3, time_scale=100))
    assert len(rep.lambda_trace) > 3
    assert len(rep.plan_trace) > 1
    assert rep.levels_intact == 4
    assert rep.achieved_error_bound == 1e-7


def test_deadline_mode_meets_deadline():
    floor = rel.transmission_time(MINI.sizes, [0] * 4, 32, 4096, 0.01, 19144.0)
    for seed in range(5):
        rep = run(scenario(AdaptiveDeadline(floor * 1.1), LossModel.hmm(), seed=seed, time_scale=20))
        assert rep.deadline_met
        assert rep.total_time_s <= floor * 1.1
        assert rep.levels_intact <= rep.levels_planned


def test_static_deadline_truncates():
    floor = rel.transmission_time(MINI.sizes[:2], [0, 0], 32, 4096, 0.01, 19144.0)
    rep = run(scenario(StaticEC((0, 0, 0, 0), deadline_s=floor + 1e-6)))
    assert rep.deadline_met
    assert rep.levels_intact == 2
    assert rep.achieved_error_bound == MINI.error_bounds[1]


def test_infeasible_deadline_is_flagged():
    rep = run(scenario(AdaptiveDeadline(0.001)))
    assert rep.error and rep.deadline_met is False
    assert math.isnan(rep.total_time_s)


def test_packet_cap_aborts():
    rep = run(scenario(StaticEC((0,)), max_packets=100))
    assert rep.aborted


def test_scenario_document_expansion():
    doc = {
        "schema_version": 1,
        "hierarchy": "nyx-mini",
        "losses": [{"kind": "static", "rate": 19}, {"kind": "hmm"}],
        "protocols": [{"kind": "udp-static-ec", "parity": [2]}, {"kind": "tcp-baseline"}],
        "seed": 5,
        "time_scale": 10,
    }
    scs = scenarios_from_dict(doc)
    assert len(scs) == 4
    assert scs[0].hierarchy == MINI and scs[0].time_scale == 10
    back = scenarios_from_dict(json.loads(json.dumps(scs[0].as_dict())))
    assert back == [scs[0]]


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"schema_version": 2},
        {"params": {"speed": 1}},
        {"hierarchy": "nyx-huge"},
        {"protocols": []},
        {"losses": [{"kind": "pareto"}]},
        {"time_scale": 0},
    ],
)
def test_scenario_rejections(patch):
    doc = {"schema_version": 1, "hierarchy": "nyx-mini", "protocol": {"kind": "tcp-baseline"}}
    doc.update(patch)
    with pytest.raises(ScenarioError):
        scenarios_from_dict(doc)


def test_report_row_and_dict():
    rep = run(scenario(StaticEC((1,)), LossModel.static(19.0), seed=1, hierarchy=SMALL))
    row = rep.row()
    assert row["protocol"] == rep.protocol
    assert json.loads(rep.to_json())["seed"] == 1
