"""Command-line entry point: ``ectransfer {plan,simulate,gen-data,send,recv}``.

Exit codes: 0 success, 2 infeasible request, 3 transfer abort or unmet
guarantee, 4 configuration error.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are the
long option names (dashes or underscores). Unknown keys are rejected, and
explicit flags override the file. ``ECT_HOST``, ``ECT_PORT``,
``ECT_DATA_PORT`` and ``ECT_OUTPUT_DIR`` override the built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import model
from .model import (
    DeadlineRequest,
    ErrorBoundRequest,
    HierarchySpec,
    ModelError,
    NetworkParams,
    PayloadSource,
    UnsatisfiableBoundError,
)
from .reliability import DeadlineInfeasibleError, DivergenceError, plan_min_error, plan_min_time, transmission_time

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_ABORT = 3
EXIT_CONFIG = 4

DEFAULT_PORT = 47000

log = logging.getLogger("ectransfer")


class ConfigError(Exception):
    pass


def _env(name: str, default):
    value = os.environ.get(name)
    if value is None or value == "":
        return default
    return type(default)(value) if default is not None else value


# -- shared argument groups -------------------------------------------------------------


def _add_hierarchy(p):
    p.add_argument("--manifest", help="manifest JSON (default: --preset)")
    p.add_argument("--preset", default="nyx-mini", choices=sorted(model.PRESETS))
    p.add_argument("--payload-dir", help="directory that relative level paths resolve against")


def _add_params(p):
    d = NetworkParams()
    p.add_argument("--latency", type=float, default=d.latency_s, help="one-way latency t in seconds")
    p.add_argument("--link-rate", type=float, default=d.link_rate, help="r_link in fragments/s")
    p.add_argument("--ec-rate", type=float, default=d.ec_rate, help="r_ec in fragments/s")
    p.add_argument("--loss-rate", type=float, default=d.loss_rate, help="loss rate lambda in packets/s")
    p.add_argument("--mtu-payload", type=int, default=d.fragment_size, help="fragment size s in bytes")
    p.add_argument("--group-size", type=int, default=d.group_size, help="FTG size n")


def _params(a) -> NetworkParams:
    return NetworkParams(a.latency, a.link_rate, a.ec_rate, a.loss_rate, a.mtu_payload, a.group_size)


def _hierarchy(a) -> HierarchySpec:
    if a.manifest:
        h = model.read_manifest(a.manifest)
        if a.payload_dir is None and h.payload_source.kind == "file":
            a.payload_dir = str(Path(a.manifest).resolve().parent)
        return h
    return model.PRESETS[a.preset]()


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, default=str)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# -- plan ------------------------------------------------------------------------------------


def cmd_plan(a) -> int:
    h, params = _hierarchy(a), _params(a)
    if a.mode == "min-time":
        if a.levels is not None:
            levels = a.levels
        elif a.error_bound is not None:
            levels = model.required_levels(h, ErrorBoundRequest(a.error_bound))
        else:
            levels = h.num_levels
        if not 1 <= levels <= h.num_levels:
            raise ConfigError(f"--levels must be in 1..{h.num_levels}")
        try:
            m, est = plan_min_time(h, levels, params)
        except DivergenceError as exc:
            print(f"infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        plan = model.CodingPlan.build(h, [m] * levels, params)
        doc = {
            "mode": a.mode,
            "levels": levels,
            "parity": m,
            "expected_total_time_s": est.expected_total_s,
            "ftgs": est.ftgs,
            "p_unrecoverable": est.p_unrecoverable,
            "plan": plan.as_dict(),
        }
    else:
        if a.deadline is None:
            raise ConfigError("min-error mode needs --deadline")
        try:
            res = plan_min_error(h, params, a.deadline, levels=a.levels)
        except DeadlineInfeasibleError as exc:
            floor = transmission_time(h.sizes[:1], [0], params.group_size, params.fragment_size,
                                      params.latency_s, params.rate)
            print(f"infeasible: {exc}; the deadline feasibility bound needs tau >= {floor:.6g}s",
                  file=sys.stderr)
            return EXIT_INFEASIBLE
        doc = {
            "mode": a.mode,
            "deadline_s": a.deadline,
            "levels": res.plan.levels_sent,
            "parity": list(res.plan.parity_per_level),
            "expected_error": res.expected_error,
            "transmission_time_s": res.transmission_time_s,
            "plan": res.plan.as_dict(),
        }
    doc["params"] = asdict(params)
    doc["manifest_hash"] = model.manifest_hash(h)
    _emit(doc, a.out)
    return EXIT_OK


# -- simulate --------------------------------------------------------------------------------


def _simulate_one(job):
    from .sim import run
    from .sim.scenario import loss_label

    label, sc = job
    row = run(sc).row()
    row["scenario"] = label
    row["loss"] = loss_label(sc.loss)
    return row


def cmd_simulate(a) -> int:
    from .sim import ScenarioError, load_scenarios
    from .sim.scenario import write_csv

    if not a.scenario:
        raise ConfigError("simulate needs --scenario FILE")
    try:
        scenarios = load_scenarios(a.scenario)
        doc = json.loads(Path(a.scenario).read_text())
    except (ScenarioError, ModelError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc)) from exc
    name = doc.get("name", Path(a.scenario).stem)
    jobs = []
    for i, sc in enumerate(scenarios):
        label = name if len(scenarios) == 1 else f"{name}#{i}"
        base = sc.seed if a.base_seed is None else a.base_seed
        jobs += [(label, sc.with_seed(base + j)) for j in range(a.seeds)]
    if a.jobs > 1:
        with ProcessPoolExecutor(a.jobs) as pool:
            rows = list(pool.map(_simulate_one, jobs))
    else:
        rows = [_simulate_one(j) for j in jobs]
    if a.format == "csv":
        text = write_csv(rows)
    else:
        text = json.dumps(rows, indent=2)
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- gen-data --------------------------------------------------------------------------------


def cmd_gen_data(a) -> int:
    if a.sizes or a.error_bounds:
        if not (a.sizes and a.error_bounds):
            raise ConfigError("--sizes and --error-bounds go together")
        base = HierarchySpec.from_lists(a.sizes, a.error_bounds)
    else:
        base = model.PRESETS[a.preset]()
    out = Path(a.out or _env("ECT_OUTPUT_DIR", "data"))
    out.mkdir(parents=True, exist_ok=True)
    names = tuple(f"level{lv.index}.bin" for lv in base.levels)
    sums = []
    for lv, fname in zip(base.levels, names):
        data = model.synthetic_level_bytes(a.seed, lv.index, lv.size_bytes)
        (out / fname).write_bytes(data)
        sums.append(model.checksum(data))
    h = HierarchySpec(base.levels, PayloadSource("file", a.seed, names)).with_checksums(sums)
    model.write_manifest(h, out / "manifest.json")
    _emit({"manifest": str(out / "manifest.json"), "sizes": h.sizes, "checksums": sums}, None)
    return EXIT_OK


# -- send / recv --------------------------------------------------------------------------------


def cmd_send(a) -> int:
    from .transport import SenderOptions, SessionAborted, parse_shim, send_with_deadline, send_with_error_bound

    if (a.deadline is None) == (a.error_bound is None):
        raise ConfigError("give exactly one of --deadline and --error-bound")
    h, params = _hierarchy(a), _params(a)
    shim = parse_shim(a.shim, a.rate_limit or params.link_rate)
    opts = SenderOptions(
        rate_limit=a.rate_limit,
        ec_rate=a.measured_ec_rate,
        shim=shim,
        queue_ftgs=a.queue_ftgs,
        static_parity=tuple(a.static_parity) if a.static_parity else None,
        adaptive=not a.no_adapt,
        planning_loss_rate=a.loss_rate,
        ftg_timeout_s=a.ftg_timeout,
        payload_dir=Path(a.payload_dir) if a.payload_dir else None,
    )
    endpoint = (a.host, a.port)
    try:
        if a.error_bound is not None:
            report = send_with_error_bound(endpoint, h, ErrorBoundRequest(a.error_bound), params, opts)
        else:
            report = send_with_deadline(endpoint, h, DeadlineRequest(a.deadline), params, opts)
    except (DeadlineInfeasibleError, UnsatisfiableBoundError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SessionAborted, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    report.config["cli"] = _resolved(a)
    _emit(report.to_dict(), a.report)
    if report.checksums_ok is False or (report.deadline_met is False):
        return EXIT_ABORT
    if a.error_bound is not None and report.achieved_error_bound > a.error_bound:
        return EXIT_ABORT
    return EXIT_OK


def cmd_recv(a) -> int:
    from .transport import ReceiverConfig, SessionAborted, receive

    cfg = ReceiverConfig(
        window_s=a.window,
        reorder_horizon=a.reorder_horizon,
        ftg_timeout_s=a.ftg_timeout,
        output_dir=Path(a.output_dir) if a.output_dir else None,
        idle_timeout_s=a.idle_timeout,
    )

    def ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", file=sys.stderr, flush=True)

    try:
        report = receive((a.host, a.port), cfg, a.data_port, on_ready=ready)
    except (SessionAborted, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    report.config["cli"] = _resolved(a)
    _emit(report.to_dict(), a.report)
    return EXIT_OK if report.checksums_ok is not False else EXIT_ABORT


# -- parser -----------------------------------------------------------------------------------


def _resolved(a) -> dict:
    return {k: v for k, v in vars(a).items() if k not in ("func",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ectransfer", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="choose parity counts for a transfer")
    p.add_argument("--config")
    _add_hierarchy(p)
    _add_params(p)
    p.add_argument("--mode", choices=("min-time", "min-error"), default="min-time")
    p.add_argument("--error-bound", type=float)
    p.add_argument("--deadline", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run seeded simulations from a scenario file")
    p.add_argument("--config")
    p.add_argument("--scenario")
    p.add_argument("--seeds", type=int, default=1, help="runs per scenario, seeds base..base+N-1")
    p.add_argument("--base-seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-data", help="write seeded level files and their manifest")
    p.add_argument("--config")
    p.add_argument("--preset", default="nyx-mini", choices=sorted(model.PRESETS))
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--error-bounds", type=float, nargs="+")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("send", help="send a hierarchy to a receiver")
    p.add_argument("--config")
    _add_hierarchy(p)
    _add_params(p)
    p.add_argument("--host", default=_env("ECT_HOST", "127.0.0.1"))
    p.add_argument("--port", type=int, default=_env("ECT_PORT", DEFAULT_PORT))
    p.add_argument("--error-bound", type=float)
    p.add_argument("--deadline", type=float)
    p.add_argument("--rate-limit", type=float, help="r_link override; default probes the path")
    p.add_argument("--measured-ec-rate", type=float, help="r_ec override; default times the encoder")
    p.add_argument("--shim", default="off", help="off | every:N | poisson:LAMBDA[:RATE[:SEED]] | "
                                                 "poisson-pct:P[:RATE[:SEED]] | trace:PATH")
    p.add_argument("--static-parity", type=int, nargs="+")
    p.add_argument("--no-adapt", action="store_true")
    p.add_argument("--queue-ftgs", type=int, default=4096)
    p.add_argument("--ftg-timeout", type=float)
    p.add_argument("--report")
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("recv", help="receive one transfer session")
    p.add_argument("--config")
    p.add_argument("--host", default=_env("ECT_HOST", "127.0.0.1"))
    p.add_argument("--port", type=int, default=_env("ECT_PORT", DEFAULT_PORT))
    p.add_argument("--data-port", type=int, default=_env("ECT_DATA_PORT", 0))
    p.add_argument("--window", type=float, default=3.0, help="loss-rate window T_W in seconds")
    p.add_argument("--reorder-horizon", type=int, default=256)
    p.add_argument("--ftg-timeout", type=float)
    p.add_argument("--idle-timeout", type=float, default=60.0)
    p.add_argument("--output-dir", default=_env("ECT_OUTPUT_DIR", None))
    p.add_argument("--report")
    p.set_defaults(func=cmd_recv)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv, args):
    """Re-parse with the config file's values as defaults."""
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    known = set(vars(args)) - {"func", "command", "config", "verbose"}
    values = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[dest] = value
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        return args.func(args)
    except (ConfigError, ModelError, ValueError) as exc:
        if isinstance(exc, (UnsatisfiableBoundError, DeadlineInfeasibleError)):
            print(f"infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
