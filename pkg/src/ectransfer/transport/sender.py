"""Sender side: guaranteed-error-bound and guaranteed-time transfers.

Three activities run per session. A producer thread encodes FTGs into a
bounded queue, the calling thread drains it at the paced rate, and a control
thread reads receiver messages and posts re-plans to the producer. A re-plan
only ever affects FTGs that have not been encoded yet.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..erasure import encode_parity, split_fragments
from ..model import (
    DeadlineRequest,
    ErrorBoundRequest,
    HierarchySpec,
    NetworkParams,
    attach_checksums,
    checksum,
    level_bytes,
    manifest_dict,
    manifest_hash,
    required_levels,
)
from ..reliability import (
    DeadlineInfeasibleError,
    DivergenceError,
    minimize_expected_error,
    optimize_parity_for_min_error,
    optimize_parity_for_min_time,
)
from . import wire
from .session import DEADLINE, ERROR_BOUND, SenderOptions, SessionAborted, TokenBucket, TransferReport

log = logging.getLogger(__name__)

_SENTINEL = object()


@dataclass(frozen=True)
class CodedFtg:
    level: int
    index: int
    k: int
    m: int
    rows: np.ndarray  # (k + m, s), data rows first

    @property
    def n(self) -> int:
        return self.k + self.m


class _Producer(threading.Thread):
    """Encodes FTGs level by level, reading the current parity at each cut."""

    def __init__(self, data: list[bytes], n: int, s: int, parity: list[int], out: queue.Queue):
        super().__init__(daemon=True, name="ftg-producer")
        self.rows = [split_fragments(d, s) for d in data]
        self.n, self.s = n, s
        self.parity = list(parity)
        self.out = out
        self.lock = threading.Lock()
        self.stop = threading.Event()
        self.level, self.offset = 0, 0
        self.counts = [0] * len(data)
        self.error: BaseException | None = None

    def position(self) -> tuple[int, int]:
        """Current level (0-based) and its rows not yet encoded; call with ``lock`` held."""
        if self.level >= len(self.rows):
            return self.level, 0
        return self.level, self.rows[self.level].shape[0] - self.offset

    def exhausted(self, level: int) -> bool:
        """Every row of ``level`` (0-based) has been cut into an FTG; call with ``lock`` held."""
        return self.level > level or (self.level == level and self.offset >= self.rows[level].shape[0])

    def _next(self) -> CodedFtg | None:
        with self.lock:
            while self.level < len(self.rows) and self.offset >= self.rows[self.level].shape[0]:
                self.level, self.offset = self.level + 1, 0
            if self.level >= len(self.rows):
                return None
            lv, m = self.level, self.parity[self.level]
            k = self.n - m
            start = self.offset
            self.offset += k
            idx = self.counts[lv]
            self.counts[lv] += 1
        block = self.rows[lv][start : start + k]
        if block.shape[0] < k:
            block = np.concatenate([block, np.zeros((k - block.shape[0], self.s), dtype=np.uint8)])
        return CodedFtg(lv + 1, idx, k, m, np.concatenate([block, encode_parity(block, m)]))

    def run(self):
        try:
            while not self.stop.is_set():
                item = self._next()
                self._put(_SENTINEL if item is None else item)
                if item is None:
                    return
        except BaseException as exc:  # surfaced by the transmitter
            self.error = exc
            self._put(_SENTINEL)

    def _put(self, item) -> None:
        while not self.stop.is_set():
            try:
                self.out.put(item, timeout=0.05)
                return
            except queue.Full:
                continue


def measure_ec_rate(n: int, s: int, min_time_s: float = 0.05) -> float:
    """Fragments per second produced by encoding with ``m = n/2``."""
    m = n // 2
    block = np.random.default_rng(0).integers(0, 256, (n - m, s), dtype=np.uint8)
    done, t0 = 0, time.perf_counter()
    while True:
        encode_parity(block, m)
        done += 1
        elapsed = time.perf_counter() - t0
        if elapsed >= min_time_s:
            return done * n / elapsed


def _changed(old: float, new: float, threshold: float) -> bool:
    return abs(new - old) > threshold * max(old, new)


class _Sender:
    def __init__(self, endpoint, hierarchy: HierarchySpec, params: NetworkParams, options: SenderOptions, mode: str,
                 request: dict):
        self.host, self.port = endpoint
        self.opts = options
        self.mode = mode
        self.request = request
        self.n, self.s, self.t = params.group_size, params.fragment_size, params.latency_s
        self.params = params
        if any(lv.checksum is None for lv in hierarchy.levels):
            hierarchy = attach_checksums(hierarchy, options.payload_dir)
        self.h = hierarchy
        self.lam_plan = options.planning_loss_rate if options.planning_loss_rate is not None else params.loss_rate
        self.ftg_timeout = options.ftg_timeout_s if options.ftg_timeout_s is not None else 4.0 * self.t
        self.seq = 0
        self.shim = options.shim.fresh()
        self.packets = 0
        self.dropped = 0
        self.lambda_trace: list = []
        self.plan_trace: list = []
        self.lost_by_round: list[list[list[int]]] = []
        self.inbox: queue.Queue = queue.Queue()
        self.send_lock = threading.Lock()
        self.producer: _Producer | None = None
        self.ctrl = None
        self.t0 = None

    # -- session plumbing -----------------------------------------------------------

    def _control(self, mtype: int, body: dict | None = None) -> None:
        with self.send_lock:
            try:
                wire.send_control(self.ctrl, mtype, body)
            except OSError as exc:
                raise SessionAborted(f"control channel lost: {exc}") from exc

    def _expect(self, *types: int, timeout: float | None = None) -> dict:
        try:
            mtype, body = self.inbox.get(timeout=timeout or self.opts.session_timeout_s)
        except queue.Empty as exc:
            raise SessionAborted("timed out waiting for the receiver") from exc
        if mtype == "closed":
            raise SessionAborted(f"control channel lost: {body}")
        if mtype == wire.SESSION_ABORT:
            raise SessionAborted(f"receiver aborted: {body.get('reason', '')}")
        if mtype not in types:
            raise SessionAborted(f"unexpected {wire.CONTROL_NAMES.get(mtype, mtype)}")
        return body

    def _reader(self) -> None:
        try:
            while True:
                mtype, body = wire.read_control(self.ctrl)
                if mtype == wire.LOSS_RATE_UPDATE:
                    self._on_update(body)
                else:
                    self.inbox.put((mtype, body))
        except (OSError, wire.WireError, wire.ControlClosed) as exc:
            self.inbox.put(("closed", exc))

    def _on_update(self, body: dict) -> None:
        window = float(body.get("window_s") or 0.0)
        if window <= 0:
            return
        lam = float(body["lost_count"]) / window
        self.lambda_trace.append((round(self._elapsed(), 6), lam))
        if self.opts.static_parity is None and self.opts.adaptive and _changed(self.lam_plan, lam,
                                                                               self.opts.replan_threshold):
            self.lam_plan = lam
            try:
                self.replan(lam)
            except Exception:  # a failed re-plan keeps the current plan
                log.exception("re-plan failed")

    def _elapsed(self) -> float:
        return 0.0 if self.t0 is None else time.monotonic() - self.t0

    def connect(self) -> None:
        self.ctrl = socket.create_connection((self.host, self.port), timeout=self.opts.connect_timeout_s)
        self.ctrl.settimeout(None)
        self.ctrl.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._control(wire.SESSION_START, {
            "manifest": manifest_dict(self.h),
            "manifest_hash": manifest_hash(self.h),
            "mode": self.mode,
            "request": self.request,
            "n": self.n,
            "s": self.s,
            "t": self.t,
        })
        self.ctrl.settimeout(self.opts.connect_timeout_s)
        mtype, body = wire.read_control(self.ctrl)
        self.ctrl.settimeout(None)
        if mtype == wire.SESSION_ABORT:
            raise SessionAborted(f"receiver refused: {body.get('reason', '')}")
        if mtype != wire.SESSION_READY:
            raise SessionAborted(f"expected SessionReady, got {wire.CONTROL_NAMES[mtype]}")
        self.udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.udp.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 4 << 20)
        self.udp.connect((self.host, int(body["data_port"])))
        threading.Thread(target=self._reader, daemon=True, name="control-reader").start()

    def probe(self) -> float:
        payload = bytes(self.s)
        head = wire.encode_header(0, 0, 0, 0, 0, 0, self.s, msg_type=wire.MSG_PROBE)
        for _ in range(self.opts.probe_packets):
            try:
                self.udp.send(head + payload)
            except OSError:
                pass
        self._control(wire.PROBE_DONE, {"sent": self.opts.probe_packets})
        body = self._expect(wire.PROBE_RESULT, timeout=self.opts.connect_timeout_s)
        received, span = int(body["received"]), float(body["span_s"])
        if received < 2 or span <= 0:
            return self.params.link_rate
        return (received - 1) / span

    def measure_rate(self) -> float:
        r_link = self.opts.rate_limit if self.opts.rate_limit is not None else self.probe()
        r_ec = self.opts.ec_rate if self.opts.ec_rate is not None else measure_ec_rate(self.n, self.s)
        self.r_link, self.r_ec = r_link, r_ec
        return min(r_link, r_ec)

    # -- data plane ---------------------------------------------------------------------

    def start_stream(self, data: list[bytes], parity: list[int]) -> None:
        self.queue: queue.Queue = queue.Queue(maxsize=self.opts.queue_ftgs)
        self.producer = _Producer(data, self.n, self.s, parity, self.queue)
        self.plan_trace.append((0.0, tuple(parity)))
        burst = max(1.0, self.r * 0.002)
        self.bucket = TokenBucket(self.r, burst)
        self.t0 = time.monotonic()
        self.producer.start()

    def next_ftg(self) -> CodedFtg | None:
        item = self.queue.get()
        if item is _SENTINEL:
            if self.producer.error is not None:
                raise self.producer.error
            return None
        return item

    def send_ftg(self, ftg: CodedFtg) -> None:
        for i in range(ftg.n):
            self.bucket.consume()
            seq = self.seq
            self.seq += 1
            self.packets += 1
            if self.shim.drop(seq):
                self.dropped += 1
                continue
            head = wire.encode_header(ftg.level, ftg.index, i, ftg.k, ftg.m, seq, self.s)
            try:
                self.udp.send(head + ftg.rows[i].tobytes())
            except OSError as exc:
                # a full socket buffer behaves like a lost datagram
                log.debug("send failed: %s", exc)

    def set_parity(self, new: list[int]) -> None:
        with self.producer.lock:
            if new != self.producer.parity:
                self.producer.parity = list(new)
                self.plan_trace.append((round(self._elapsed(), 6), tuple(new)))

    def report(self, total: float, rounds: int, done: dict, levels_planned: int, deadline=None) -> TransferReport:
        return TransferReport(
            role="sender",
            mode=self.mode,
            total_time_s=total,
            rounds=rounds,
            achieved_error_bound=float(done.get("achieved_error_bound", 1.0)),
            levels_intact=int(done.get("levels_intact", 0)),
            levels_planned=levels_planned,
            bytes_on_wire=self.packets * (wire.HEADER_SIZE + self.s),
            packets_sent=self.packets,
            packets_received=int(done.get("packets_received", 0)),
            packets_shim_dropped=self.dropped,
            lost_ftgs_by_round=self.lost_by_round,
            lambda_trace=self.lambda_trace,
            plan_trace=self.plan_trace,
            rate=self.r,
            checksums_ok=done.get("checksums_ok"),
            deadline_s=deadline,
            deadline_met=None if deadline is None else total <= deadline,
            malformed_packets=int(done.get("malformed_packets", 0)),
            config={
                "params": asdict(self.params),
                "request": self.request,
                "shim": self.shim.describe(),
                "rate_link": self.r_link,
                "rate_ec": self.r_ec,
                "queue_ftgs": self.opts.queue_ftgs,
                "static_parity": self.opts.static_parity,
                "adaptive": self.opts.adaptive,
                "replan_threshold": self.opts.replan_threshold,
                "planning_loss_rate": self.opts.planning_loss_rate,
                "ftg_timeout_s": self.ftg_timeout,
            },
        )

    def close(self) -> None:
        if self.producer is not None:
            self.producer.stop.set()
        for sock in (getattr(self, "udp", None), getattr(self, "ctrl", None)):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass

    def abort(self, reason: str) -> None:
        if getattr(self, "ctrl", None) is None:
            return
        try:
            self._control(wire.SESSION_ABORT, {"reason": reason})
        except SessionAborted:
            pass

    def replan(self, lam: float) -> None:
        raise NotImplementedError


def _broadcast(parity, levels: int) -> list[int]:
    parity = list(parity)
    if len(parity) == 1:
        return parity * levels
    if len(parity) < levels:
        raise ValueError(f"static parity needs 1 or {levels} entries")
    return parity[:levels]


class _ErrorBoundSender(_Sender):
    def __init__(self, endpoint, hierarchy, request: ErrorBoundRequest, params, options):
        super().__init__(endpoint, hierarchy, params, options, ERROR_BOUND, {"target_error": request.target_error})
        self.levels = required_levels(self.h, request)
        self.total = sum(self.h.sizes[: self.levels])

    def _solve(self, lam: float) -> int:
        try:
            m, _ = optimize_parity_for_min_time(self.total, self.n, self.s, self.t, self.r, lam)
        except DivergenceError:
            m = self.n // 2
        return m

    def replan(self, lam: float) -> None:
        self.set_parity([self._solve(lam)] * self.levels)

    def run(self) -> TransferReport:
        self.connect()
        self.r = self.measure_rate()
        if self.opts.static_parity is not None:
            parity = _broadcast(self.opts.static_parity, self.levels)
        else:
            parity = [self._solve(self.lam_plan)] * self.levels
        data = [level_bytes(self.h, i, self.opts.payload_dir) for i in range(1, self.levels + 1)]
        self.start_stream(data, parity)
        buf: dict[tuple[int, int], CodedFtg] = {}
        while (ftg := self.next_ftg()) is not None:
            self.send_ftg(ftg)
            buf[(ftg.level, ftg.index)] = ftg
        counts = list(self.producer.counts)
        rounds = 0
        while True:
            self._control(wire.TRANSMISSION_ENDED, {
                "round": rounds, "ftg_counts": counts, "levels_complete": self.levels, "last_seq": self.seq - 1,
            })
            lost = self._expect(wire.LOST_FTG_LIST)["lost"]
            self.lost_by_round.append([list(x) for x in lost])
            if not lost:
                break
            rounds += 1
            # retransmitted FTGs keep their original k and m
            for level, index in lost:
                self.send_ftg(buf[(level, index)])
        total = self._elapsed()
        done = self._expect(wire.SESSION_DONE)
        return self.report(total, rounds, done, self.levels)


class _DeadlineSender(_Sender):
    def __init__(self, endpoint, hierarchy, request: DeadlineRequest, params, options):
        super().__init__(endpoint, hierarchy, params, options, DEADLINE, {"deadline_s": request.deadline_s})
        self.deadline = request.deadline_s
        # what must fit after the last datagram: latency, the receiver's wait and slack
        self.reserve = self.t + self.ftg_timeout + options.deadline_guard_s
        self.budget = self.deadline - self.reserve

    def replan(self, lam: float) -> None:
        prod = self.producer
        bounds = [1.0] + self.h.error_bounds
        with prod.lock:
            j, remaining = prod.position()
            if j >= self.levels or remaining == 0:
                return
            queued = self.queue.qsize() * self.n / self.r
            budget = self.budget - self._elapsed() - queued
            sizes = [remaining * self.s] + self.h.sizes[j + 1 : self.levels]
            fails = [bounds[j]] + bounds[j + 1 : self.levels]
            sol = minimize_expected_error(
                sizes, fails, bounds[self.levels], self.n, self.s, self.t, self.r, lam, budget
            )
            if sol is None:
                return
            new = prod.parity[:j] + list(sol.parity)
            if new != prod.parity:
                prod.parity = new
                self.plan_trace.append((round(self._elapsed(), 6), tuple(new)))

    def run(self) -> TransferReport:
        self.connect()
        self.r = self.measure_rate()
        if self.opts.static_parity is not None:
            levels = len(self.opts.static_parity) if len(self.opts.static_parity) > 1 else self.h.num_levels
            parity = _broadcast(self.opts.static_parity, levels)
        else:
            try:
                if self.budget <= 0:
                    raise DeadlineInfeasibleError(
                        f"deadline {self.deadline:g}s leaves no time after the {self.reserve:g}s end-of-transfer reserve"
                    )
                plan = optimize_parity_for_min_error(
                    self.h, self.n, self.s, self.t, self.r, self.lam_plan, self.budget
                )
            except Exception as exc:
                self.abort(str(exc))
                raise
            parity = list(plan.plan.parity_per_level)
        self.levels = len(parity)
        data = [level_bytes(self.h, i, self.opts.payload_dir) for i in range(1, self.levels + 1)]
        self.start_stream(data, parity)
        per_ftg = self.n / self.r
        while (ftg := self.next_ftg()) is not None:
            # never start an FTG whose last datagram could land after the budget
            if self._elapsed() + per_ftg > self.budget:
                self.producer.stop.set()
                break
            self.send_ftg(ftg)
            self.sent_counts[ftg.level - 1] = ftg.index + 1
        counts = list(self.sent_counts)
        complete = 0
        with self.producer.lock:
            for j in range(self.levels):
                if not (self.producer.exhausted(j) and counts[j] == self.producer.counts[j]):
                    break
                complete = j + 1
        self._control(wire.TRANSMISSION_ENDED, {
            "round": 0, "ftg_counts": counts, "levels_complete": complete, "last_seq": self.seq - 1, "final": True,
        })
        lost = self._expect(wire.LOST_FTG_LIST)["lost"]
        self.lost_by_round.append([list(x) for x in lost])
        total = self._elapsed()
        done = self._expect(wire.SESSION_DONE)
        return self.report(total, 0, done, self.levels, deadline=self.deadline)

    def start_stream(self, data, parity):
        self.sent_counts = [0] * len(data)
        super().start_stream(data, parity)


def _run(sender: _Sender) -> TransferReport:
    try:
        return sender.run()
    except SessionAborted:
        raise
    except BaseException as exc:
        sender.abort(f"sender failed: {exc}")
        raise
    finally:
        sender.close()


def send_with_error_bound(endpoint: tuple[str, int], hierarchy: HierarchySpec, request: ErrorBoundRequest,
                          params: NetworkParams | None = None, options: SenderOptions | None = None) -> TransferReport:
    """Deliver the levels ``request`` needs, retransmitting lost FTGs until none remain."""
    return _run(_ErrorBoundSender(endpoint, hierarchy, request, params or NetworkParams(), options or SenderOptions()))


def send_with_deadline(endpoint: tuple[str, int], hierarchy: HierarchySpec, request: DeadlineRequest,
                       params: NetworkParams | None = None, options: SenderOptions | None = None) -> TransferReport:
    """Single pass planned for the lowest expected error that fits the deadline."""
    return _run(_DeadlineSender(endpoint, hierarchy, request, params or NetworkParams(), options or SenderOptions()))


def level_checksums(hierarchy: HierarchySpec, base_dir=None) -> list[str]:
    return [checksum(level_bytes(hierarchy, i, base_dir)) for i in range(1, hierarchy.num_levels + 1)]
