"""Discrete-event execution of a Scenario.

Time is virtual. The sender owns one paced transmission slot every ``1/r``
seconds; every packet reaches the receiver ``t`` seconds after leaving. The
erasure-coded protocols advance one FTG at a time (its ``n`` packets occupy
consecutive slots) and interleave the sparse events (receiver windows, control
messages) from a heap. TCP needs per-packet ACK handling and has its own loop.
"""

from __future__ import annotations

import bisect
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from ..model import ErrorBoundRequest, ModelError, required_levels
from ..reliability import (
    DeadlineInfeasibleError,
    DivergenceError,
    minimize_expected_error,
    optimize_parity_for_min_error,
    optimize_parity_for_min_time,
)
from .loss import LossProcess, RateTrajectory
from .scenario import (
    AdaptiveDeadline,
    AdaptiveErrorBound,
    Scenario,
    SimReport,
    StaticEC,
    TcpBaseline,
    protocol_label,
)

TIME_EPS = 1e-12


class SimulationAborted(RuntimeError):
    pass


def _streams(seed: int):
    traj, loss, misc = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(traj), np.random.default_rng(loss), np.random.default_rng(misc)


@dataclass
class _Ftg:
    level: int
    index: int
    k: int
    m: int
    data: int  # data fragments carrying level bytes (the rest is padding)


@dataclass
class _Counters:
    sent: int = 0
    lost: int = 0
    data_lost: int = 0
    data_recovered: int = 0
    ftgs_sent: int = 0
    ftgs_lost: int = 0


class _CodedRun:
    """Shared machinery for the erasure-coded protocols."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        p = sc.params
        self.n, self.s, self.t, self.r = p.group_size, p.fragment_size, p.latency_s, p.rate
        traj_rng, loss_rng, _ = _streams(sc.seed)
        self.loss = LossProcess(RateTrajectory(sc.loss, traj_rng, sc.time_scale), loss_rng, 1.0 / self.r)
        self.lam_prior = sc.planning_rate(self.loss.trajectory.rate_at(0.0))
        self.window = sc.effective_window_s
        self.fb = sc.feedback_latency_s
        self.clock = 0.0
        self.counts = _Counters()
        self.lost_arrivals: list[float] = []
        self.heap: list = []
        self._order = 0
        self.window_start = 0.0
        self.lambda_trace: list[tuple[float, float]] = []
        self.plan_trace: list[tuple[float, tuple[int, ...]]] = []
        self.active = True
        self._push(self.window, "tick", None)

    def _push(self, time, kind, payload):
        self._order += 1
        heapq.heappush(self.heap, (time, self._order, kind, payload))

    def on_loss_update(self, now: float, lam: float) -> None:
        pass

    def run_events(self, until: float) -> None:
        while self.heap and self.heap[0][0] <= until + TIME_EPS:
            time, _, kind, payload = heapq.heappop(self.heap)
            if kind == "tick":
                if not self.active:
                    continue
                lo = bisect.bisect_right(self.lost_arrivals, self.window_start)
                hi = bisect.bisect_right(self.lost_arrivals, time)
                lam = (hi - lo) / self.window
                self.lambda_trace.append((time, lam))
                self.window_start = time
                self._push(time + self.fb, "lambda", lam)
                self._push(time + self.window, "tick", None)
            elif kind == "lambda":
                if self.active:
                    self.on_loss_update(time, payload)

    def send_ftg(self, ftg: _Ftg, start: float | None = None) -> tuple[bool, float]:
        """Send one FTG from the next free slot. Returns (recoverable, last arrival)."""
        n = ftg.k + ftg.m
        if start is not None:
            self.clock = max(self.clock, start)
        if self.counts.sent + n > self.sc.max_packets:
            raise SimulationAborted(f"packet cap {self.sc.max_packets} reached")
        arrivals = self.clock + self.t + np.arange(n) / self.r
        lost = self.loss.mark(arrivals)
        if self.sc.drop_seqs:
            base = self.counts.sent
            for i in range(n):
                if base + i in self.sc.drop_seqs:
                    lost[i] = True
        nlost = int(lost.sum())
        c = self.counts
        c.sent += n
        c.ftgs_sent += 1
        self.clock += n / self.r
        if nlost:
            c.lost += nlost
            self.lost_arrivals.extend(arrivals[lost].tolist())
            dlost = int(lost[: ftg.k].sum())
            c.data_lost += dlost
            if nlost > ftg.m:
                c.ftgs_lost += 1
                return False, float(arrivals[-1])
            c.data_recovered += dlost
        return True, float(arrivals[-1])

    def report(self, **kw) -> SimReport:
        c = self.counts
        return SimReport(
            protocol=protocol_label(self.sc.protocol),
            seed=self.sc.seed,
            packets_sent=c.sent,
            packets_lost=c.lost,
            packets_delivered=c.sent - c.lost,
            data_fragments_lost=c.data_lost,
            data_fragments_recovered=c.data_recovered,
            ftgs_sent=c.ftgs_sent,
            ftgs_lost=c.ftgs_lost,
            lambda_trace=tuple(self.lambda_trace),
            plan_trace=tuple(self.plan_trace),
            **kw,
        )


def _fragments(size: int, s: int) -> int:
    return -(-size // s)


class _LevelCursor:
    """Walks the data fragments of levels ``1..l``, cutting FTGs of varying k."""

    def __init__(self, sizes, s):
        self.remaining = [_fragments(S, s) for S in sizes]
        self.level = 0
        self.next_index = [0] * len(sizes)

    def done(self) -> bool:
        while self.level < len(self.remaining) and self.remaining[self.level] == 0:
            self.level += 1
        return self.level >= len(self.remaining)

    def take(self, n: int, m: int) -> _Ftg:
        j = self.level
        k = n - m
        data = min(k, self.remaining[j])
        self.remaining[j] -= data
        ftg = _Ftg(j + 1, self.next_index[j], k, m, data)
        self.next_index[j] += 1
        return ftg


class _RetransmittingRun(_CodedRun):
    """Send levels ``1..l`` once, then re-send lost FTGs (same k, m) each round
    until a round comes back clean."""

    levels: int
    m_of_level: list[int]

    def current_m(self, level_index: int) -> int:
        return self.m_of_level[level_index]

    def execute(self) -> SimReport:
        h = self.sc.hierarchy
        cursor = _LevelCursor(h.sizes[: self.levels], self.s)
        lost: list[_Ftg] = []
        last = 0.0
        while not cursor.done():
            self.run_events(self.clock)
            ftg = cursor.take(self.n, self.current_m(cursor.level))
            ok, last = self.send_ftg(ftg)
            if not ok:
                lost.append(ftg)
        rounds, retransmitted = 0, []
        while True:
            end = last  # the end-of-round marker trails the last packet
            self.run_events(end + self.fb)
            if not lost:
                break
            rounds += 1
            start = end + self.fb
            again = []
            for i, ftg in enumerate(lost):
                self.run_events(max(self.clock, start))
                retransmitted.append((rounds, ftg.level, ftg.index))
                ok, last = self.send_ftg(ftg, start if i == 0 else None)
                if not ok:
                    again.append(ftg)
            lost = again
        self.active = False
        return self.report(
            total_time_s=last,
            retransmission_rounds=rounds,
            achieved_error_bound=h.bound_after(self.levels),
            levels_intact=self.levels,
            levels_planned=self.levels,
            retransmitted_ftgs=tuple(retransmitted),
        )


class _StaticRetransmit(_RetransmittingRun):
    def __init__(self, sc: Scenario, proto: StaticEC):
        super().__init__(sc)
        L = sc.hierarchy.num_levels
        self.levels = proto.levels or (len(proto.parity) if len(proto.parity) > 1 else L)
        self.m_of_level = _broadcast(proto.parity, self.levels)
        self.plan_trace.append((0.0, tuple(self.m_of_level)))


def _broadcast(parity, levels) -> list[int]:
    if len(parity) == 1:
        return [parity[0]] * levels
    if len(parity) < levels:
        raise ModelError(f"{len(parity)} parity entries for {levels} levels")
    return list(parity[:levels])


class _AdaptiveErrorBound(_RetransmittingRun):
    def __init__(self, sc: Scenario, proto: AdaptiveErrorBound):
        super().__init__(sc)
        self.levels = required_levels(sc.hierarchy, ErrorBoundRequest(proto.target_error))
        self.total = sum(sc.hierarchy.sizes[: self.levels])
        self.lam_plan = self.lam_prior
        self.m = self._solve(self.lam_plan)
        self.plan_trace.append((0.0, (self.m,)))

    def _solve(self, lam: float) -> int:
        try:
            m, _ = optimize_parity_for_min_time(self.total, self.n, self.s, self.t, self.r, lam)
        except DivergenceError:
            m = self.n // 2
        return m

    def current_m(self, level_index: int) -> int:
        return self.m

    def on_loss_update(self, now, lam):
        if not _changed(self.lam_plan, lam, self.sc.replan_threshold):
            return
        self.lam_plan = lam
        m = self._solve(lam)
        if m != self.m:
            self.m = m
            self.plan_trace.append((now, (m,)))


def _changed(old: float, new: float, threshold: float) -> bool:
    return abs(new - old) > threshold * max(old, new)


class _SinglePass(_CodedRun):
    """Deadline-bounded single pass: no retransmission, no packet may arrive
    after the deadline."""

    def __init__(self, sc: Scenario, deadline: float):
        super().__init__(sc)
        self.deadline = deadline
        self.levels = 0
        self.m_of_level: list[int] = []

    def on_replan(self, now: float, cursor: _LevelCursor) -> None:
        pass

    def execute(self) -> SimReport:
        h = self.sc.hierarchy
        sizes = h.sizes[: self.levels]
        cursor = _LevelCursor(sizes, self.s)
        self.cursor = cursor
        intact = [True] * self.levels
        last = 0.0
        truncated = False
        while not cursor.done():
            self.run_events(self.clock)
            ftg_m = self.m_of_level[cursor.level]
            n = self.n
            if self.clock + self.t + (n - 1) / self.r > self.deadline + TIME_EPS:
                truncated = True
                break
            ftg = cursor.take(n, ftg_m)
            ok, last = self.send_ftg(ftg)
            if not ok:
                intact[ftg.level - 1] = False
        if truncated:
            for j in range(cursor.level, self.levels):
                if cursor.remaining[j] > 0:
                    intact[j] = False
        self.run_events(last)
        self.active = False
        prefix = 0
        while prefix < self.levels and intact[prefix]:
            prefix += 1
        return self.report(
            total_time_s=last,
            retransmission_rounds=0,
            achieved_error_bound=h.bound_after(prefix),
            levels_intact=prefix,
            levels_planned=self.levels,
            deadline_s=self.deadline,
            deadline_met=last <= self.deadline + TIME_EPS,
        )


class _StaticSinglePass(_SinglePass):
    def __init__(self, sc: Scenario, proto: StaticEC):
        super().__init__(sc, proto.deadline_s)
        L = sc.hierarchy.num_levels
        self.levels = proto.levels or (len(proto.parity) if len(proto.parity) > 1 else L)
        self.m_of_level = _broadcast(proto.parity, self.levels)
        self.plan_trace.append((0.0, tuple(self.m_of_level)))


class _AdaptiveDeadline(_SinglePass):
    def __init__(self, sc: Scenario, proto: AdaptiveDeadline):
        super().__init__(sc, proto.deadline_s)
        self.lam_plan = self.lam_prior
        plan = optimize_parity_for_min_error(
            sc.hierarchy, self.n, self.s, self.t, self.r, self.lam_plan, proto.deadline_s
        )
        self.levels = plan.plan.levels_sent
        self.m_of_level = list(plan.plan.parity_per_level)
        self.plan_trace.append((0.0, tuple(self.m_of_level)))

    def on_loss_update(self, now, lam):
        if not _changed(self.lam_plan, lam, self.sc.replan_threshold):
            return
        self.lam_plan = lam
        cursor = self.cursor
        if cursor.done():
            return
        j = cursor.level
        bounds = [1.0] + self.sc.hierarchy.error_bounds
        sizes = [cursor.remaining[j] * self.s] + self.sc.hierarchy.sizes[j + 1 : self.levels]
        fails = [bounds[j]] + bounds[j + 1 : self.levels]
        start = max(self.clock, now)
        sol = minimize_expected_error(
            sizes, fails, bounds[self.levels], self.n, self.s, self.t, self.r, lam, self.deadline - start
        )
        if sol is None:
            return
        new = self.m_of_level[:j] + list(sol.parity)
        if new != self.m_of_level:
            self.m_of_level = new
            self.plan_trace.append((now, tuple(new)))


# -- TCP baseline ---------------------------------------------------------------


def _run_tcp(sc: Scenario, proto: TcpBaseline) -> SimReport:
    p = sc.params
    t, r, s = p.latency_s, p.rate, p.fragment_size
    levels = proto.levels or sc.hierarchy.num_levels
    total = sum(_fragments(S, s) for S in sc.hierarchy.sizes[:levels])
    window = proto.window or max(1, math.ceil(2 * t * r))
    rto = proto.rto_factor * t
    traj_rng, loss_rng, _ = _streams(sc.seed)
    loss = LossProcess(RateTrajectory(sc.loss, traj_rng, sc.time_scale), loss_rng, 1.0 / r)

    heap: list = []
    order = 0

    def push(time, prio, kind, val):
        nonlocal order
        order += 1
        # ACKs win ties against timers landing on the same instant
        heapq.heappush(heap, (round(time, 12), prio, order, kind, val))

    snd_una = snd_nxt = 0
    next_slot = clock = 0.0
    dup = 0
    in_recovery, recover = False, 0
    retx: list[int] = []
    timer_gen, timer_on = 0, False
    rcv_nxt = 0
    ooo: set[int] = set()
    sent = lost_count = 0
    finish = None
    retransmits = 0

    def arm(now):
        nonlocal timer_gen, timer_on
        timer_gen += 1
        timer_on = True
        push(now + rto, 1, "rto", timer_gen)

    while finish is None:
        can_new = snd_nxt < total and snd_nxt < snd_una + window
        send_at = max(next_slot, clock) if (retx or can_new) else math.inf
        if heap and heap[0][0] <= send_at + TIME_EPS:
            now, _, _, kind, val = heapq.heappop(heap)
            clock = now
            if kind == "ack":
                if val > snd_una:
                    snd_una = val
                    dup = 0
                    if in_recovery:
                        if val >= recover:
                            in_recovery = False
                        elif val not in retx:
                            retx.append(val)
                    if snd_una < snd_nxt:
                        arm(now)
                    else:
                        timer_on = False
                        timer_gen += 1
                    # a timeout may have queued a segment that is now covered
                    retx = [x for x in retx if x >= snd_una]
                elif val == snd_una and snd_una < snd_nxt:
                    dup += 1
                    if dup == proto.dupack_threshold and not in_recovery:
                        in_recovery, recover = True, snd_nxt
                        if snd_una not in retx:
                            retx.append(snd_una)
            elif kind == "rto":
                if timer_on and val == timer_gen and snd_una < snd_nxt:
                    in_recovery, recover, dup = False, snd_nxt, 0
                    if snd_una not in retx:
                        retx.append(snd_una)
                    arm(now)
            continue
        if math.isinf(send_at):
            raise SimulationAborted("TCP sender stalled with nothing scheduled")
        now = clock = send_at
        if retx:
            seg = retx.pop(0)
            retransmits += 1
            arm(now)
        else:
            seg = snd_nxt
            snd_nxt += 1
            if not timer_on:
                arm(now)
        if sent >= sc.max_packets:
            raise SimulationAborted(f"packet cap {sc.max_packets} reached")
        arrival = now + t
        dropped = loss.mark_one(arrival) or sent in sc.drop_seqs
        sent += 1
        next_slot = now + 1.0 / r
        if dropped:
            lost_count += 1
            continue
        if seg >= rcv_nxt:
            ooo.add(seg)
            while rcv_nxt in ooo:
                ooo.discard(rcv_nxt)
                rcv_nxt += 1
        if rcv_nxt >= total:
            finish = arrival
        push(arrival + t, 0, "ack", rcv_nxt)

    return SimReport(
        protocol=protocol_label(proto),
        seed=sc.seed,
        total_time_s=finish,
        retransmission_rounds=retransmits,
        achieved_error_bound=sc.hierarchy.bound_after(levels),
        levels_intact=levels,
        levels_planned=levels,
        packets_sent=sent,
        packets_lost=lost_count,
        packets_delivered=sent - lost_count,
        data_fragments_lost=lost_count,
        data_fragments_recovered=0,
        ftgs_sent=0,
        ftgs_lost=0,
    )


def run(sc: Scenario) -> SimReport:
    """Execute one scenario. Infeasible deadlines and packet-cap aborts come
    back as flagged reports rather than exceptions."""
    proto = sc.protocol
    try:
        if isinstance(proto, TcpBaseline):
            return _run_tcp(sc, proto)
        if isinstance(proto, StaticEC):
            engine = _StaticSinglePass(sc, proto) if proto.deadline_s else _StaticRetransmit(sc, proto)
        elif isinstance(proto, AdaptiveErrorBound):
            engine = _AdaptiveErrorBound(sc, proto)
        elif isinstance(proto, AdaptiveDeadline):
            try:
                engine = _AdaptiveDeadline(sc, proto)
            except DeadlineInfeasibleError as exc:
                return _failed(sc, str(exc), deadline=proto.deadline_s)
        else:
            raise TypeError(f"unknown protocol {proto!r}")
        return engine.execute()
    except SimulationAborted as exc:
        return _failed(sc, str(exc), aborted=True)


def _failed(sc: Scenario, message: str, aborted: bool = False, deadline=None) -> SimReport:
    return SimReport(
        protocol=protocol_label(sc.protocol),
        seed=sc.seed,
        total_time_s=math.nan,
        retransmission_rounds=0,
        achieved_error_bound=1.0,
        levels_intact=0,
        levels_planned=0,
        packets_sent=0,
        packets_lost=0,
        packets_delivered=0,
        data_fragments_lost=0,
        data_fragments_recovered=0,
        ftgs_sent=0,
        ftgs_lost=0,
        deadline_s=deadline,
        deadline_met=None if deadline is None else False,
        aborted=aborted,
        error=message,
    )
