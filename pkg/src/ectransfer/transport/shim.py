"""Deterministic loss injection on the send path (test plumbing).

A shim sees each data datagram's send index (its global sequence number) and
decides whether to drop it before it reaches the socket.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..sim.loss import LossModel, LossProcess, RateTrajectory

OFF = "off"
EVERY_NTH = "every-nth"
POISSON = "seeded-poisson"
TRACE = "trace-file"


class LossShim:
    mode = OFF

    def drop(self, index: int) -> bool:
        return False

    def dropped_indices(self, count: int) -> list[int]:
        """Indices a fresh copy of this shim would drop among the first ``count``."""
        fresh = self.fresh()
        return [i for i in range(count) if fresh.drop(i)]

    def fresh(self) -> "LossShim":
        return type(self)()

    def describe(self) -> str:
        return OFF


@dataclass
class EveryNth(LossShim):
    """Drop indices ``N-1, 2N-1, ...``: exactly ``count // N`` of the first ``count``."""

    every: int
    mode = EVERY_NTH

    def __post_init__(self):
        if self.every < 1:
            raise ValueError("N must be >= 1")

    def drop(self, index: int) -> bool:
        return (index + 1) % self.every == 0

    def fresh(self):
        return EveryNth(self.every)

    def describe(self) -> str:
        return f"every:{self.every}"


class SeededPoisson(LossShim):
    """The simulator's single-slot Poisson loss process on a virtual timeline
    where datagram ``i`` arrives at ``i / rate``; losses hit a fraction close
    to ``loss_rate / rate`` of datagrams whatever the real pacing is."""

    mode = POISSON

    def __init__(self, loss_rate: float, rate: float, seed: int = 0):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.loss_rate, self.rate, self.seed = float(loss_rate), float(rate), int(seed)
        traj_rng, loss_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        traj = RateTrajectory(LossModel.static(self.loss_rate), traj_rng)
        self._process = LossProcess(traj, loss_rng, 1.0 / self.rate)
        self._next = 0
        self._decided: dict[int, bool] = {}

    def drop(self, index: int) -> bool:
        # decisions are made in index order so any call pattern sees the same set
        while self._next <= index:
            self._decided[self._next] = self._process.mark_one((self._next + 1) / self.rate)
            self._next += 1
        return self._decided.get(index, False)

    def fresh(self):
        return SeededPoisson(self.loss_rate, self.rate, self.seed)

    def describe(self) -> str:
        return f"poisson:{self.loss_rate:g}:{self.rate:g}:{self.seed}"


class TraceFile(LossShim):
    """Drop the indices listed in a file (JSON list or one integer per line)."""

    mode = TRACE

    def __init__(self, path: str | Path):
        self.path = Path(path)
        text = self.path.read_text().strip()
        if text.startswith("["):
            items = json.loads(text)
        else:
            items = [line.split("#")[0].strip() for line in text.splitlines()]
            items = [x for x in items if x]
        self.indices = frozenset(int(x) for x in items)

    def drop(self, index: int) -> bool:
        return index in self.indices

    def fresh(self):
        return TraceFile(self.path)

    def describe(self) -> str:
        return f"trace:{self.path}"


def parse_shim(spec: str | None, rate: float | None = None) -> LossShim:
    """``off``, ``every:N``, ``poisson:LAMBDA[:RATE[:SEED]]``, ``trace:PATH``.

    ``poisson-pct:P[:RATE[:SEED]]`` sets the loss rate to P percent of ``RATE``.
    """
    if spec is None or spec in ("", OFF):
        return LossShim()
    kind, _, rest = spec.partition(":")
    parts = rest.split(":") if rest else []
    try:
        if kind in ("every", EVERY_NTH):
            return EveryNth(int(parts[0]))
        if kind in ("poisson", "poisson-pct", POISSON):
            r = float(parts[1]) if len(parts) > 1 and parts[1] else rate
            if r is None:
                raise ValueError("poisson shim needs a rate")
            seed = int(parts[2]) if len(parts) > 2 else 0
            lam = float(parts[0]) * r / 100.0 if kind == "poisson-pct" else float(parts[0])
            return SeededPoisson(lam, r, seed)
        if kind in ("trace", TRACE):
            return TraceFile(rest)
    except (IndexError, ValueError) as exc:
        raise ValueError(f"bad shim spec {spec!r}: {exc}") from exc
    raise ValueError(f"unknown shim mode {kind!r}")
