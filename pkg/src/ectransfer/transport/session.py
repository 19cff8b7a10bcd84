"""Types shared by the sender and receiver, and the token-bucket pacer."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .shim import LossShim

ERROR_BOUND = "error-bound"
DEADLINE = "deadline"

DEFAULT_QUEUE_FTGS = 4096


class SessionAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class ReceiverConfig:
    window_s: float = 3.0
    reorder_horizon: int = 256
    # None means 4 t, with t taken from the session parameters
    ftg_timeout_s: float | None = None
    output_dir: Path | None = None
    idle_timeout_s: float = 60.0
    recv_buffer_bytes: int = 8 << 20

    def __post_init__(self):
        if self.window_s <= 0 or self.reorder_horizon <= 0 or self.idle_timeout_s <= 0:
            raise ValueError("receiver window, horizon and idle timeout must be positive")
        if self.ftg_timeout_s is not None and self.ftg_timeout_s <= 0:
            raise ValueError("FTG timeout must be positive")

    def timeout_for(self, latency_s: float) -> float:
        return self.ftg_timeout_s if self.ftg_timeout_s is not None else 4.0 * latency_s


@dataclass(frozen=True)
class SenderOptions:
    # r_link override in datagrams/s; None runs the probe
    rate_limit: float | None = None
    # r_ec override; None times parity generation at session start
    ec_rate: float | None = None
    shim: LossShim = field(default_factory=LossShim)
    queue_ftgs: int = DEFAULT_QUEUE_FTGS
    # fixed per-level parity; disables planning and re-planning
    static_parity: tuple[int, ...] | None = None
    adaptive: bool = True
    replan_threshold: float = 0.25
    planning_loss_rate: float | None = None
    # deadline mode stops early enough to leave this much slack after the
    # receiver's end-of-round wait
    deadline_guard_s: float = 0.05
    ftg_timeout_s: float | None = None
    probe_packets: int = 2000
    connect_timeout_s: float = 10.0
    session_timeout_s: float = 600.0
    payload_dir: Path | None = None


@dataclass
class TransferReport:
    role: str
    mode: str
    total_time_s: float
    rounds: int
    achieved_error_bound: float
    levels_intact: int
    levels_planned: int
    bytes_on_wire: int
    packets_sent: int = 0
    packets_received: int = 0
    packets_shim_dropped: int = 0
    lost_ftgs_by_round: list = field(default_factory=list)
    lambda_trace: list = field(default_factory=list)
    plan_trace: list = field(default_factory=list)
    rate: float | None = None
    checksums_ok: bool | None = None
    deadline_s: float | None = None
    deadline_met: bool | None = None
    malformed_packets: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str))


class TokenBucket:
    """Paces events at ``rate`` per second, allowing bursts of ``burst``.

    Sleeps are never shorter than ``min_sleep_s``; keep ``burst`` at least
    ``rate * min_sleep_s`` so the long-run rate is still met.
    """

    def __init__(self, rate: float, burst: float = 1.0, clock=time.monotonic, sleep=time.sleep,
                 min_sleep_s: float = 0.0005):
        if rate <= 0 or burst < 1:
            raise ValueError("rate must be positive and burst >= 1")
        self.rate, self.burst = float(rate), float(burst)
        self.clock, self.sleep, self.min_sleep_s = clock, sleep, min_sleep_s
        self.tokens = self.burst
        self.last = clock()

    def _refill(self, now: float) -> None:
        self.tokens = min(self.burst, self.tokens + (now - self.last) * self.rate)
        self.last = now

    def consume(self, n: float = 1.0) -> None:
        """Block until ``n`` tokens are available, then take them."""
        while True:
            self._refill(self.clock())
            # tolerance so float residue cannot demand a sleep too short to register
            if self.tokens >= n - 1e-9:
                self.tokens -= n
                return
            # oversleeping is absorbed by the burst allowance
            self.sleep(max((n - self.tokens) / self.rate, self.min_sleep_s))
