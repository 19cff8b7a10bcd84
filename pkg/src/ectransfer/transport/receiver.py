"""Receiver side of a transfer session.

One thread multiplexes the UDP data socket and the control connection. FTGs
decode as soon as ``k`` distinct fragments are in; fragments from later
rounds merge with whatever an earlier round left behind.
"""

from __future__ import annotations

import logging
import selectors
import socket
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..erasure import ErasureError, decode_block
from ..model import ModelError, checksum, manifest_from_dict, manifest_hash
from . import wire
from .session import ReceiverConfig, SessionAborted, TransferReport

log = logging.getLogger(__name__)

_ADJUDICATE_EVERY_S = 0.01


class _FtgState:
    __slots__ = ("k", "m", "frags", "block", "last_seq", "last_arrival", "lost")

    def __init__(self, k: int, m: int):
        self.k, self.m = k, m
        self.frags: dict[int, bytes] | None = {}
        self.block: np.ndarray | None = None
        self.last_seq = -1
        self.last_arrival = 0.0
        self.lost = False


class Receiver:
    """Accepts one session on ``control_address`` and runs it to completion."""

    def __init__(self, listen: tuple[str, int] = ("127.0.0.1", 0), config: ReceiverConfig | None = None,
                 data_port: int = 0):
        self.config = config or ReceiverConfig()
        self.data_port = data_port
        self._listener = socket.create_server(listen)
        self.control_address = self._listener.getsockname()[:2]

    def close(self) -> None:
        self._listener.close()

    def serve(self) -> TransferReport:
        try:
            return _Session(self).run()
        finally:
            self.close()


class _Session:
    def __init__(self, rx: Receiver):
        self.rx = rx
        self.cfg = rx.config
        self.ftgs: dict[tuple[int, int], _FtgState] = {}
        self.pending: set[tuple[int, int]] = set()
        self.highest_seq = -1
        self.packets = 0
        self.malformed = 0
        self.probe_count = 0
        self.probe_first = self.probe_last = None
        self.lambda_trace: list = []
        self.lost_by_round: list[list[list[int]]] = []
        self.rounds = 0
        self.end_wait = None  # (body, wait-until) once TransmissionEnded arrives
        self.t_first_data = None
        self.last_activity = time.monotonic()

    # -- setup ------------------------------------------------------------------

    def _handshake(self):
        self.rx._listener.settimeout(self.cfg.idle_timeout_s)
        try:
            conn, _ = self.rx._listener.accept()
        except socket.timeout as exc:
            raise SessionAborted("no sender connected") from exc
        conn.settimeout(self.cfg.idle_timeout_s)
        self.ctrl = conn
        mtype, body = wire.read_control(conn)
        if mtype != wire.SESSION_START:
            raise SessionAborted(f"expected SessionStart, got {wire.CONTROL_NAMES[mtype]}")
        try:
            self.hierarchy = manifest_from_dict(body["manifest"])
        except (KeyError, ModelError) as exc:
            wire.send_control(conn, wire.SESSION_ABORT, {"reason": f"bad manifest: {exc}"})
            raise SessionAborted(f"bad manifest: {exc}") from exc
        if manifest_hash(self.hierarchy) != body.get("manifest_hash"):
            wire.send_control(conn, wire.SESSION_ABORT, {"reason": "manifest hash mismatch"})
            raise SessionAborted("manifest hash mismatch")
        self.start = body
        self.mode = body.get("mode", "")
        self.n, self.s = int(body["n"]), int(body["s"])
        self.timeout = self.cfg.timeout_for(float(body.get("t", 0.01)))
        host = conn.getsockname()[0]
        self.udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.udp.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, self.cfg.recv_buffer_bytes)
        self.udp.bind((host, self.rx.data_port))
        self.udp.setblocking(False)
        wire.send_control(conn, wire.SESSION_READY, {"data_port": self.udp.getsockname()[1]})
        conn.setblocking(False)

    # -- data path ----------------------------------------------------------------

    def _on_datagram(self, buf: bytes, now: float) -> None:
        try:
            pkt = wire.Packet.decode(buf)
        except wire.WireError:
            self.malformed += 1
            return
        if pkt.msg_type == wire.MSG_PROBE:
            self.probe_count += 1
            if self.probe_first is None:
                self.probe_first = now
            self.probe_last = now
            return
        if pkt.msg_type != wire.MSG_FRAGMENT or len(pkt.payload) != self.s or pkt.k + pkt.m > self.n \
                or not 1 <= pkt.level <= self.hierarchy.num_levels:
            self.malformed += 1
            return
        if self.t_first_data is None:
            self.t_first_data = now
            self.window_start = now
            self.window_seq = pkt.global_seq - 1
            self.window_received = 0
        self.packets += 1
        self.window_received += 1
        if pkt.global_seq > self.highest_seq:
            self.highest_seq = pkt.global_seq
        key = (pkt.level, pkt.ftg_index)
        st = self.ftgs.get(key)
        if st is None:
            st = self.ftgs[key] = _FtgState(pkt.k, pkt.m)
        elif (st.k, st.m) != (pkt.k, pkt.m):
            self.malformed += 1
            return
        st.last_seq, st.last_arrival = pkt.global_seq, now
        if st.block is not None:
            return
        st.lost = False
        st.frags[pkt.fragment_index] = pkt.payload
        if len(st.frags) >= st.k:
            try:
                st.block = decode_block(st.frags.items(), st.k, st.m)
            except ErasureError:
                self.malformed += 1
                return
            st.frags = None
            self.pending.discard(key)
        else:
            self.pending.add(key)

    def _drain(self, now: float, limit: int | None = None) -> int:
        got = 0
        while limit is None or got < limit:
            try:
                buf = self.udp.recv(65535)
            except (BlockingIOError, InterruptedError):
                return got
            self._on_datagram(buf, now)
            got += 1
        return got

    def _adjudicate(self, now: float) -> None:
        for key in list(self.pending):
            st = self.ftgs[key]
            if st.lost:
                continue
            if self.highest_seq - st.last_seq > self.cfg.reorder_horizon or now - st.last_arrival > self.timeout:
                st.lost = True

    def _window(self, now: float) -> None:
        if self.t_first_data is None or now - self.window_start < self.cfg.window_s:
            return
        advanced = self.highest_seq - self.window_seq
        lost = max(0, advanced - self.window_received)
        elapsed = now - self.window_start
        self.lambda_trace.append((round(now - self.t_first_data, 6), lost, advanced, round(elapsed, 6)))
        self._send(wire.LOSS_RATE_UPDATE, {"lost_count": lost, "window_s": elapsed, "advanced": advanced})
        self.window_start, self.window_seq, self.window_received = now, self.highest_seq, 0

    # -- control path ---------------------------------------------------------------

    def _send(self, mtype: int, body: dict) -> None:
        self.ctrl.setblocking(True)
        try:
            wire.send_control(self.ctrl, mtype, body)
        except OSError as exc:
            raise SessionAborted(f"control channel lost: {exc}") from exc
        finally:
            self.ctrl.setblocking(False)

    def _on_control(self, mtype: int, body: dict, now: float) -> None:
        if mtype == wire.PROBE_DONE:
            self._drain(now)
            span = (self.probe_last - self.probe_first) if self.probe_first is not None else 0.0
            self._send(wire.PROBE_RESULT, {"received": self.probe_count, "span_s": span})
            self.probe_count, self.probe_first, self.probe_last = 0, None, None
        elif mtype == wire.TRANSMISSION_ENDED:
            # datagrams sent before the frame may still sit in the socket buffer
            self._drain(now)
            self.end_wait = (body, now + self.timeout)
        elif mtype == wire.SESSION_ABORT:
            raise SessionAborted(f"sender aborted: {body.get('reason', '')}")
        else:
            raise SessionAborted(f"unexpected control message {wire.CONTROL_NAMES[mtype]}")

    def _expected(self, body: dict) -> list[tuple[int, int]]:
        return [(lv, i) for lv, count in enumerate(body["ftg_counts"], start=1) for i in range(count)]

    def _missing(self, body: dict) -> list[tuple[int, int]]:
        return [key for key in self._expected(body) if key not in self.ftgs or self.ftgs[key].block is None]

    def _round_over(self, now: float) -> bool:
        body, until = self.end_wait
        if not self._missing(body):
            return True
        if self.t_first_data is not None and self.packets:
            last = max((self.ftgs[k].last_arrival for k in self.pending), default=0.0)
            until = max(until, last + self.timeout)
        return now >= until

    def _finish_round(self) -> bool:
        body, _ = self.end_wait
        self.end_wait = None
        lost = self._missing(body)
        pairs = [list(k) for k in lost]
        self.lost_by_round.append(pairs)
        self._send(wire.LOST_FTG_LIST, {"round": body.get("round", 0), "lost": pairs})
        if body.get("round", 0) > 0:
            self.rounds = body["round"]
        self.final_body = body
        return bool(body.get("final")) or not lost

    def _level_bytes(self, level: int, count: int) -> bytes | None:
        blocks = []
        for i in range(count):
            st = self.ftgs.get((level, i))
            if st is None or st.block is None:
                return None
            blocks.append(st.block.reshape(-1))
        size = self.hierarchy.levels[level - 1].size_bytes
        data = np.concatenate(blocks) if blocks else np.zeros(0, dtype=np.uint8)
        if data.size < size:
            return None
        return data[:size].tobytes()

    def _finalize(self, t_end: float) -> TransferReport:
        body = self.final_body
        counts = body["ftg_counts"]
        complete = int(body.get("levels_complete", len(counts)))
        intact, ok = 0, True
        out_dir = Path(self.cfg.output_dir) if self.cfg.output_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        have_sums = True
        for lv in range(1, complete + 1):
            data = self._level_bytes(lv, counts[lv - 1])
            if data is None:
                break
            expected = self.hierarchy.levels[lv - 1].checksum
            if expected is None:
                have_sums = False
            elif checksum(data) != expected:
                ok = False
                break
            if out_dir:
                (out_dir / f"level{lv}.bin").write_bytes(data)
            intact = lv
        achieved = self.hierarchy.bound_after(intact)
        report = TransferReport(
            role="receiver",
            mode=self.mode,
            total_time_s=t_end - (self.t_first_data or t_end),
            rounds=self.rounds,
            achieved_error_bound=achieved,
            levels_intact=intact,
            levels_planned=len(counts),
            bytes_on_wire=self.packets * (wire.HEADER_SIZE + self.s),
            packets_received=self.packets,
            lost_ftgs_by_round=self.lost_by_round,
            lambda_trace=self.lambda_trace,
            checksums_ok=(ok if have_sums else None),
            malformed_packets=self.malformed,
            config={k: str(v) if isinstance(v, Path) else v for k, v in asdict(self.cfg).items()},
        )
        self._send(wire.SESSION_DONE, {
            "levels_intact": intact,
            "achieved_error_bound": achieved,
            "checksums_ok": report.checksums_ok,
            "packets_received": self.packets,
            "malformed_packets": self.malformed,
        })
        return report

    # -- main loop --------------------------------------------------------------------

    def run(self) -> TransferReport:
        self._handshake()
        sel = selectors.DefaultSelector()
        sel.register(self.udp, selectors.EVENT_READ, "data")
        sel.register(self.ctrl, selectors.EVENT_READ, "ctrl")
        frames = wire.FrameBuffer()
        next_adjudication = 0.0
        try:
            while True:
                wait = 0.005 if self.end_wait else min(0.05, self.cfg.window_s / 4)
                events = sel.select(wait)
                now = time.monotonic()
                for sk, _ in events:
                    self.last_activity = now
                    if sk.data == "data":
                        # bounded so timers and control frames are not starved
                        self._drain(now, 512)
                        continue
                    try:
                        chunk = self.ctrl.recv(1 << 16)
                    except (BlockingIOError, InterruptedError):
                        continue
                    except OSError as exc:
                        raise SessionAborted(f"control channel lost: {exc}") from exc
                    if not chunk:
                        raise SessionAborted("control channel closed by sender")
                    try:
                        messages = frames.feed(chunk)
                    except wire.WireError as exc:
                        raise SessionAborted(f"bad control frame: {exc}") from exc
                    for mtype, body in messages:
                        self._on_control(mtype, body, now)
                if now >= next_adjudication:
                    self._adjudicate(now)
                    next_adjudication = now + _ADJUDICATE_EVERY_S
                self._window(now)
                if self.end_wait and self._round_over(now):
                    if self._finish_round():
                        return self._finalize(time.monotonic())
                if now - self.last_activity > self.cfg.idle_timeout_s:
                    raise SessionAborted("session idle for too long")
        finally:
            sel.close()
            self.udp.close()
            self.ctrl.close()


def receive(listen: tuple[str, int], config: ReceiverConfig | None = None, data_port: int = 0,
            on_ready=None) -> TransferReport:
    """Serve one session. ``on_ready`` gets the bound control address."""
    rx = Receiver(listen, config, data_port)
    if on_ready is not None:
        on_ready(rx.control_address)
    return rx.serve()
