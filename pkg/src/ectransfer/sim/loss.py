"""Loss processes for the simulator.

Loss events arrive as a (possibly time-varying) Poisson process and wait in a
single-slot queue. A packet reaching the receiver while the slot holds an event
is dropped and the slot is cleared. An event that comes due while the slot is
full waits for the clear, then takes the slot at that instant; the next
inter-loss gap is drawn only once an event has been posted.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

STATIC = "static"
HMM = "hmm"

DEFAULT_HMM_STATES = ((19.0, 2.0), (383.0, 40.0), (957.0, 100.0))
DEFAULT_TRANSITION_RATE = 0.04


@dataclass(frozen=True)
class LossModel:
    kind: str = STATIC
    rate: float = 0.0
    states: tuple[tuple[float, float], ...] = DEFAULT_HMM_STATES
    transition_rate: float = DEFAULT_TRANSITION_RATE

    def __post_init__(self):
        if self.kind not in (STATIC, HMM):
            raise ValueError(f"unknown loss model {self.kind!r}")
        if self.kind == STATIC and self.rate < 0:
            raise ValueError("static loss rate must be >= 0")
        if self.kind == HMM:
            if len(self.states) < 2:
                raise ValueError("HMM needs at least two states")
            if any(mu <= 0 or sd < 0 for mu, sd in self.states):
                raise ValueError("HMM means must be positive and stddevs >= 0")
            if self.transition_rate <= 0:
                raise ValueError("transition rate must be positive")

    @classmethod
    def static(cls, rate: float) -> "LossModel":
        return cls(STATIC, float(rate))

    @classmethod
    def hmm(cls, states=DEFAULT_HMM_STATES, transition_rate=DEFAULT_TRANSITION_RATE) -> "LossModel":
        return cls(HMM, 0.0, tuple((float(a), float(b)) for a, b in states), float(transition_rate))

    def mean_rate(self) -> float:
        """Long-run loss rate; HMM states are visited uniformly."""
        if self.kind == STATIC:
            return self.rate
        return float(np.mean([mu for mu, _ in self.states]))

    def as_dict(self) -> dict:
        if self.kind == STATIC:
            return {"kind": STATIC, "rate": self.rate}
        return {
            "kind": HMM,
            "states": [list(st) for st in self.states],
            "transition_rate": self.transition_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossModel":
        kind = d.get("kind", STATIC)
        if kind == STATIC:
            return cls.static(d.get("rate", 0.0))
        if kind != HMM:
            raise ValueError(f"unknown loss model {kind!r}")
        return cls.hmm(
            d.get("states", DEFAULT_HMM_STATES), d.get("transition_rate", DEFAULT_TRANSITION_RATE)
        )


def hmm_step(
    state: int, rng: np.random.Generator, model: LossModel, time_scale: float = 1.0
) -> tuple[int, float, float]:
    """Leave ``state``: returns (next state, its loss rate, holding time).

    The next state is uniform over the others, its rate is Gaussian clamped at
    zero, and the holding time is exponential with the model's transition rate
    (divided by ``time_scale`` to compress the chain for short runs).
    """
    others = [i for i in range(len(model.states)) if i != state]
    nxt = others[int(rng.integers(len(others)))]
    mu, sd = model.states[nxt]
    lam = max(0.0, float(rng.normal(mu, sd))) if sd > 0 else mu
    hold = float(rng.exponential(1.0 / model.transition_rate)) / time_scale
    return nxt, lam, hold


class RateTrajectory:
    """Piecewise-constant loss rate, generated lazily as time advances."""

    def __init__(self, model: LossModel, rng: np.random.Generator, time_scale: float = 1.0):
        self.model = model
        self.rng = rng
        self.time_scale = time_scale
        self._cache = None
        if model.kind == STATIC:
            self.starts = [0.0]
            self.rates = [model.rate]
            self.states = [0]
            self._end = math.inf
        else:
            state = int(rng.integers(len(model.states)))
            mu, sd = model.states[state]
            lam = max(0.0, float(rng.normal(mu, sd))) if sd > 0 else mu
            hold = float(rng.exponential(1.0 / model.transition_rate)) / time_scale
            self.starts, self.rates, self.states = [0.0], [lam], [state]
            self._end = hold

    def _extend_to(self, time: float) -> None:
        while self._end <= time:
            state, lam, hold = hmm_step(self.states[-1], self.rng, self.model, self.time_scale)
            self.starts.append(self._end)
            self.rates.append(lam)
            self.states.append(state)
            self._end += hold

    def _segment_end(self, i: int) -> float:
        return self.starts[i + 1] if i + 1 < len(self.starts) else self._end

    def rate_at(self, time: float) -> float:
        self._extend_to(time)
        return self.rates[bisect.bisect_right(self.starts, time) - 1]

    def _tables(self):
        if self._cache is None or self._cache[0].shape[0] != len(self.starts):
            starts = np.asarray(self.starts)
            rates = np.asarray(self.rates)
            base = np.concatenate(([0.0], np.cumsum(np.diff(starts) * rates[:-1])))
            self._cache = (starts, rates, base)
        return self._cache

    def cumulative(self, times: np.ndarray) -> np.ndarray:
        """Integrated rate from 0 to each of ``times``."""
        times = np.asarray(times, dtype=float)
        if self.model.kind == STATIC:
            return self.rates[0] * times
        self._extend_to(float(times.max()))
        starts, rates, base = self._tables()
        idx = np.searchsorted(starts, times, side="right") - 1
        return base[idx] + rates[idx] * (times - starts[idx])

    def mass_between(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        if self.model.kind == STATIC:
            return self.rates[0] * (b - a)
        lo, hi = self.cumulative(np.array([a, b]))
        return float(hi - lo)

    def segments_until(self, time: float) -> list[tuple[float, float]]:
        self._extend_to(time)
        return [(s, r) for s, r in zip(self.starts, self.rates) if s <= time]


@dataclass
class LossProcess:
    """Single-slot loss queue driven by a rate trajectory.

    The process runs on the clock of the wire: each packet exposes it for its
    own slot of ``slot_s`` seconds before arrival (less if the previous packet
    arrived closer), and idle stretches between packets consume no loss
    intensity. Positions below are in units of integrated loss intensity along
    that busy clock, so gaps between events are unit exponentials.
    """

    trajectory: RateTrajectory
    rng: np.random.Generator
    slot_s: float
    slot_full: bool = False
    busy_mass: float = 0.0
    last_arrival: float = -math.inf
    next_event: float = field(init=False)
    events_posted: int = 0

    def __post_init__(self):
        if self.slot_s <= 0:
            raise ValueError("slot length must be positive")
        self.next_event = float(self.rng.exponential())

    def _post(self, at: float) -> None:
        self.slot_full = True
        self.events_posted += 1
        self.next_event = at + float(self.rng.exponential())

    def _positions(self, arrivals: np.ndarray) -> np.ndarray:
        prev = np.empty_like(arrivals)
        prev[0] = self.last_arrival
        prev[1:] = arrivals[:-1]
        starts = np.maximum(np.maximum(arrivals - self.slot_s, prev), 0.0)
        both = self.trajectory.cumulative(np.concatenate((arrivals, starts)))
        mass = both[: arrivals.shape[0]] - both[arrivals.shape[0] :]
        pos = self.busy_mass + np.cumsum(mass)
        self.busy_mass = float(pos[-1])
        self.last_arrival = float(arrivals[-1])
        return pos

    def mark(self, arrivals: np.ndarray) -> np.ndarray:
        """Loss mask for packets reaching the receiver at sorted ``arrivals``.

        Calls must come in time order; successive calls continue one process.
        """
        arrivals = np.asarray(arrivals, dtype=float)
        size = arrivals.shape[0]
        lost = np.zeros(size, dtype=bool)
        if size == 0:
            return lost
        pos = self._positions(arrivals)
        i = 0
        while i < size:
            if not self.slot_full:
                if self.next_event > pos[-1]:
                    break
                # first packet whose slot covers the event finds the queue full
                i += int(np.searchsorted(pos[i:], self.next_event, side="left"))
                if i >= size:
                    break
                self._post(self.next_event)
            lost[i] = True
            self.slot_full = False
            # an event that came due while the slot was busy takes it now
            if self.next_event <= pos[i]:
                self._post(float(pos[i]))
            i += 1
        return lost

    def mark_one(self, arrival: float) -> bool:
        """Scalar form of :meth:`mark` for one packet."""
        start = max(arrival - self.slot_s, self.last_arrival, 0.0)
        self.busy_mass += self.trajectory.mass_between(start, arrival)
        self.last_arrival = arrival
        pos = self.busy_mass
        if not self.slot_full:
            if self.next_event > pos:
                return False
            self._post(self.next_event)
        self.slot_full = False
        if self.next_event <= pos:
            self._post(pos)
        return True
