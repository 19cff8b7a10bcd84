"""Scenario and report types for the simulator, with JSON/CSV emission."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

from ..model import (
    PRESETS,
    HierarchySpec,
    ManifestError,
    NetworkParams,
    manifest_dict,
    manifest_from_dict,
)
from .loss import LossModel

SCHEMA_VERSION = 1
INITIAL_RATE = "initial"

TCP = "tcp-baseline"
STATIC_EC = "udp-static-ec"
ADAPTIVE_ERROR = "adaptive-error-bound"
ADAPTIVE_DEADLINE = "adaptive-deadline"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class TcpBaseline:
    """Fixed-window TCP without congestion control.

    ``window`` defaults to the bandwidth-delay product ``ceil(2 t r)``.
    """

    window: int | None = None
    rto_factor: float = 2.0
    dupack_threshold: int = 3
    levels: int | None = None
    kind: str = field(default=TCP, init=False)


@dataclass(frozen=True)
class StaticEC:
    """Fixed parity per level. Without a deadline, lost FTGs are re-sent
    until every level arrives; with one, the transfer is a single pass."""

    parity: tuple[int, ...] = (0,)
    levels: int | None = None
    deadline_s: float | None = None
    kind: str = field(default=STATIC_EC, init=False)

    def __post_init__(self):
        object.__setattr__(self, "parity", tuple(int(m) for m in self.parity))
        if not self.parity:
            raise ScenarioError("static parity needs at least one entry")


@dataclass(frozen=True)
class AdaptiveErrorBound:
    target_error: float
    kind: str = field(default=ADAPTIVE_ERROR, init=False)


@dataclass(frozen=True)
class AdaptiveDeadline:
    deadline_s: float
    kind: str = field(default=ADAPTIVE_DEADLINE, init=False)


Protocol = TcpBaseline | StaticEC | AdaptiveErrorBound | AdaptiveDeadline
_PROTOCOLS = {TCP: TcpBaseline, STATIC_EC: StaticEC, ADAPTIVE_ERROR: AdaptiveErrorBound, ADAPTIVE_DEADLINE: AdaptiveDeadline}


def protocol_dict(p: Protocol) -> dict:
    d = asdict(p)
    if "parity" in d:
        d["parity"] = list(d["parity"])
    return d


def protocol_from_dict(d: dict) -> Protocol:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _PROTOCOLS:
        raise ScenarioError(f"unknown protocol {kind!r}")
    cls = _PROTOCOLS[kind]
    allowed = {f.name for f in fields(cls) if f.init}
    extra = set(d) - allowed
    if extra:
        raise ScenarioError(f"unknown {kind} keys: {sorted(extra)}")
    if "parity" in d:
        parity = d["parity"]
        d["parity"] = (parity,) if isinstance(parity, int) else tuple(parity)
    return cls(**d)


def protocol_label(p: Protocol) -> str:
    if isinstance(p, StaticEC):
        tag = ",".join(map(str, p.parity))
        return f"{STATIC_EC}[{tag}]" + (f"@{p.deadline_s:g}s" if p.deadline_s else "")
    if isinstance(p, AdaptiveErrorBound):
        return f"{ADAPTIVE_ERROR}({p.target_error:g})"
    if isinstance(p, AdaptiveDeadline):
        return f"{ADAPTIVE_DEADLINE}({p.deadline_s:g}s)"
    return TCP


@dataclass(frozen=True)
class Scenario:
    hierarchy: HierarchySpec
    params: NetworkParams
    loss: LossModel
    protocol: Protocol
    seed: int
    window_s: float = 3.0
    # divides the HMM holding times and the receiver window, so a scaled-down
    # hierarchy still sees several windows and state changes per transfer
    time_scale: float = 1.0
    feedback_latency_s: float = 0.0
    # None plans with the loss model's mean rate; "initial" with the rate in
    # force when the transfer starts, as a sender measuring the path would
    planning_loss_rate: float | str | None = None
    replan_threshold: float = 0.25
    max_packets: int = 50_000_000
    drop_seqs: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.window_s <= 0 or self.time_scale <= 0:
            raise ScenarioError("window and time scale must be positive")
        if self.feedback_latency_s < 0:
            raise ScenarioError("feedback latency must be >= 0")
        if self.replan_threshold < 0:
            raise ScenarioError("replan threshold must be >= 0")
        if isinstance(self.planning_loss_rate, str) and self.planning_loss_rate != INITIAL_RATE:
            raise ScenarioError(f"planning_loss_rate must be a number, null or {INITIAL_RATE!r}")
        object.__setattr__(self, "drop_seqs", frozenset(int(x) for x in self.drop_seqs))

    @property
    def effective_window_s(self) -> float:
        return self.window_s / self.time_scale

    def planning_rate(self, initial_rate: float | None = None) -> float:
        if self.planning_loss_rate == INITIAL_RATE:
            if initial_rate is None:
                raise ScenarioError("initial planning rate needs the trajectory's first rate")
            return initial_rate
        if self.planning_loss_rate is not None:
            return float(self.planning_loss_rate)
        return self.loss.mean_rate()

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "hierarchy": manifest_dict(self.hierarchy),
            "params": asdict(self.params),
            "loss": self.loss.as_dict(),
            "protocol": protocol_dict(self.protocol),
            "seed": self.seed,
            "window_s": self.window_s,
            "time_scale": self.time_scale,
            "feedback_latency_s": self.feedback_latency_s,
            "planning_loss_rate": self.planning_loss_rate,
            "replan_threshold": self.replan_threshold,
            "max_packets": self.max_packets,
            "drop_seqs": sorted(self.drop_seqs),
        }


_SCENARIO_KEYS = {
    "schema_version", "hierarchy", "params", "loss", "losses", "protocol", "protocols",
    "seed", "window_s", "time_scale", "feedback_latency_s", "planning_loss_rate",
    "replan_threshold", "max_packets", "drop_seqs", "name",
}
_PARAM_KEYS = {f.name for f in fields(NetworkParams)}


def _hierarchy_from(d) -> HierarchySpec:
    if isinstance(d, str):
        if d not in PRESETS:
            raise ScenarioError(f"unknown hierarchy preset {d!r}")
        return PRESETS[d]()
    if isinstance(d, dict) and set(d) == {"preset"}:
        return _hierarchy_from(d["preset"])
    try:
        return manifest_from_dict(d)
    except ManifestError as exc:
        raise ScenarioError(str(exc)) from exc


def scenarios_from_dict(d: dict) -> list[Scenario]:
    """Expand a scenario document into one Scenario per (loss, protocol) pair.

    ``losses`` and ``protocols`` lists may replace ``loss`` and ``protocol``
    to describe sweeps. The seed given is the base seed.
    """
    extra = set(d) - _SCENARIO_KEYS
    if extra:
        raise ScenarioError(f"unknown scenario keys: {sorted(extra)}")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    if "hierarchy" not in d:
        raise ScenarioError("scenario needs a hierarchy")
    hierarchy = _hierarchy_from(d["hierarchy"])
    pd = d.get("params", {})
    bad = set(pd) - _PARAM_KEYS
    if bad:
        raise ScenarioError(f"unknown params keys: {sorted(bad)}")
    try:
        params = NetworkParams(**pd)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc
    losses = d.get("losses", [d.get("loss", {"kind": "static", "rate": 0.0})])
    protocols = d.get("protocols", [d.get("protocol")] if "protocol" in d else None)
    if not protocols:
        raise ScenarioError("scenario needs a protocol")
    try:
        loss_models = [LossModel.from_dict(x) for x in losses]
        protos = [protocol_from_dict(x) for x in protocols]
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc
    opts = {
        k: d[k]
        for k in ("window_s", "time_scale", "feedback_latency_s", "planning_loss_rate",
                  "replan_threshold", "max_packets", "drop_seqs")
        if k in d
    }
    seed = int(d.get("seed", 0))
    return [
        Scenario(hierarchy, params, loss, proto, seed, **opts)
        for loss, proto in itertools.product(loss_models, protos)
    ]


def load_scenarios(path: str | Path) -> list[Scenario]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError("scenario file must hold a JSON object")
    return scenarios_from_dict(doc)


@dataclass(frozen=True)
class SimReport:
    protocol: str
    seed: int
    total_time_s: float
    retransmission_rounds: int
    achieved_error_bound: float
    levels_intact: int
    levels_planned: int
    packets_sent: int
    packets_lost: int
    packets_delivered: int
    data_fragments_lost: int
    data_fragments_recovered: int
    ftgs_sent: int
    ftgs_lost: int
    deadline_s: float | None = None
    deadline_met: bool | None = None
    aborted: bool = False
    error: str | None = None
    lambda_trace: tuple[tuple[float, float], ...] = ()
    plan_trace: tuple[tuple[float, tuple[int, ...]], ...] = ()
    retransmitted_ftgs: tuple[tuple[int, int, int], ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_trace"] = [list(x) for x in self.lambda_trace]
        d["plan_trace"] = [[t, list(p)] for t, p in self.plan_trace]
        d["retransmitted_ftgs"] = [list(x) for x in self.retransmitted_ftgs]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def row(self) -> dict:
        lam = [x for _, x in self.lambda_trace]
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "total_time_s": repr(self.total_time_s),
            "retransmission_rounds": self.retransmission_rounds,
            "achieved_error_bound": repr(self.achieved_error_bound),
            "levels_intact": self.levels_intact,
            "levels_planned": self.levels_planned,
            "packets_sent": self.packets_sent,
            "packets_lost": self.packets_lost,
            "packets_delivered": self.packets_delivered,
            "ftgs_sent": self.ftgs_sent,
            "ftgs_lost": self.ftgs_lost,
            "deadline_s": "" if self.deadline_s is None else repr(self.deadline_s),
            "deadline_met": "" if self.deadline_met is None else int(self.deadline_met),
            "aborted": int(self.aborted),
            "error": self.error or "",
            "windows": len(lam),
            "mean_lambda_estimate": repr(float(sum(lam) / len(lam))) if lam else "",
        }


CSV_COLUMNS = (
    "scenario", "loss", "protocol", "seed", "total_time_s", "retransmission_rounds",
    "achieved_error_bound", "levels_intact", "levels_planned", "packets_sent", "packets_lost",
    "packets_delivered", "ftgs_sent", "ftgs_lost", "deadline_s", "deadline_met", "aborted",
    "error", "windows", "mean_lambda_estimate",
)


def loss_label(loss: LossModel) -> str:
    if loss.kind == "static":
        return f"static({loss.rate:g})"
    return "hmm(" + ";".join(f"{mu:g}/{sd:g}" for mu, sd in loss.states) + f";q={loss.transition_rate:g})"


def write_csv(rows: Iterable[dict], out=None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})
    return buf.getvalue() if out is None else ""


def mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else math.nan
