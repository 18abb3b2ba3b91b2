"""Command-line front end: ``python -m localmutex run|stats``.

Exit codes: 0 clean run, 1 checker violation (or replay/reduction
mismatch), 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .apps import RUMOR, AgentProgramError, PopulationLayer, RepeatedLocking, load_agent_program
from .checker import Monitor, slow_threshold
from .scheduler import (
    Mode,
    ReplayError,
    ScheduleConfig,
    Simulation,
    TraceParseError,
    Trace,
    TraceRecorder,
    read_trace,
    reduction_check,
    replay,
)
from .tvg import Scenario, ScenarioError, load_scenario

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


@dataclass
class RunSummary:
    seed: int
    config: dict
    rounds: int = 0
    issued: int = 0
    succeeded: int = 0
    failed: int = 0
    slow: int = 0
    latency: dict = field(default_factory=dict)  # p50/p90/p99/max in rounds
    trials_histogram: dict = field(default_factory=dict)  # trials -> requests
    violations: dict = field(default_factory=dict)
    messages_sent: int = 0
    messages_lost: int = 0
    horizon_exceeded: bool = False
    digest: Optional[str] = None

    @property
    def violation_total(self) -> int:
        return sum(self.violations.values())

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(sim: Simulation, monitor: Monitor) -> RunSummary:
    """Summary of a finished run from its world state and monitor."""
    lo = monitor.lockout(sim.round)
    done = [r for r in monitor.records if r.success_round is not None]
    lat = np.array([r.latency for r in done], dtype=float)
    latency = {}
    if lat.size:
        p50, p90, p99 = np.percentile(lat, [50, 90, 99])
        latency = {"p50": float(p50), "p90": float(p90), "p99": float(p99), "max": int(lat.max())}
    hist = Counter(r.trials for r in done)
    violations = monitor.violation_counts()
    violations["lockout"] = lo["failed"]
    topo = sim.topology
    return RunSummary(
        seed=sim.config.seed,
        config=sim.config.to_dict(),
        rounds=sim.round,
        issued=lo["issued"],
        succeeded=lo["succeeded"],
        failed=lo["failed"],
        slow=lo["slow"],
        latency=latency,
        trials_histogram={str(k): hist[k] for k in sorted(hist)},
        violations=violations,
        messages_sent=topo.messages_sent,
        messages_lost=topo.messages_lost + topo.messages_dropped_unbound,
        horizon_exceeded=lo["failed"] > 0,
        digest=sim.digest(),
    )


def issue_cutoff(horizon: int, fairness: int, delta: int) -> int:
    """Last round at which drivers issue new Lock calls."""
    cut = horizon - slow_threshold(fairness, delta)
    return cut if cut > 0 else horizon // 2


def _monitor(config: ScheduleConfig, delta: int) -> Monitor:
    return Monitor(slow_after=slow_threshold(config.fairness_bound, delta))


# -- commands -----------------------------------------------------------------------------


def _scenario_from_args(args) -> Scenario:
    if args.scenario:
        sc = load_scenario(args.scenario)
        return Scenario(
            sc.node_count,
            args.delta if args.delta is not None else sc.delta,
            sc.edges,
            sc.events,
            args.p_add if args.p_add is not None else sc.p_add,
            args.p_del if args.p_del is not None else sc.p_del,
        )
    return Scenario(
        args.nodes,
        args.delta if args.delta is not None else 4,
        [],
        [],
        0.05 if args.p_add is None else args.p_add,
        0.05 if args.p_del is None else args.p_del,
    )


def _config_from_args(args) -> ScheduleConfig:
    return ScheduleConfig(
        mode=args.mode,
        fairness_bound=args.fairness,
        async_max_duration=args.dmax if args.mode == "async" else 1,
        seed=args.seed,
        horizon=args.horizon,
        k=args.k,
        strict_pseudocode=args.strict_pseudocode,
    )


def cmd_run(args, out) -> int:
    if args.replay:
        return _cmd_replay(args, out)
    scenario = _scenario_from_args(args)
    config = _config_from_args(args)
    stream = open(args.trace_out, "w") if args.trace_out else None
    keep = bool(args.reduce_check)
    recorder = TraceRecorder(stream, keep=keep) if (stream or keep) else None
    try:
        sim = Simulation(scenario, config, trace=recorder)
        monitor = _monitor(config, scenario.delta)
        sim.observers.append(monitor)
        cutoff = issue_cutoff(config.horizon, config.fairness_bound, scenario.delta)
        app_report = {"app": args.app}
        layer = None
        if args.app == "lockapi":
            RepeatedLocking(cutoff=cutoff).attach(sim)
        elif args.app == "popproto":
            program = load_agent_program(args.agent_program) if args.agent_program else RUMOR
            initial = [0] * scenario.node_count
            initial[0] = program.state_count - 1
            layer = PopulationLayer(program, initial, cutoff=cutoff).attach(sim)
        sim.run()
        sim.finish_trace()
    finally:
        if stream is not None:
            stream.close()
    summary = summarize(sim, monitor)
    code = EXIT_VIOLATION if summary.violation_total else EXIT_OK
    if layer is not None:
        app_report.update(
            interactions=len(layer.interactions),
            final_states=Counter(layer.program.names[s] for s in layer.agent_states),
            violations=len(layer.violations),
        )
        if layer.violations:
            code = EXIT_VIOLATION
    report = {"summary": summary.to_dict(), "app": app_report}
    if args.reduce_check:
        if config.mode is not Mode.ASYNC:
            print("error: --reduce-check needs --mode async", file=sys.stderr)
            return EXIT_USAGE
        header = {"kind": "HEADER", "config": config.to_dict(), "scenario": scenario.to_dict()}
        mismatches = reduction_check(Trace(header, recorder.events))
        executions = sum(1 for ev in recorder.events if ev.kind == "ACTIVATION")
        report["reduction"] = {"executions": executions, "mismatches": len(mismatches)}
        if mismatches:
            code = EXIT_VIOLATION
    _write_report(report, args, out)
    return code


def _cmd_replay(args, out) -> int:
    trace = read_trace(args.replay)
    delta = trace.header["scenario"]["delta"]
    config = ScheduleConfig(**trace.header["config"])
    monitor = _monitor(config, delta)
    sim, verifier = replay(trace, observers=[monitor])
    summary = summarize(sim, monitor)
    recorded = None if trace.footer is None else trace.footer.get("digest")
    match = recorded == summary.digest
    report = {
        "summary": summary.to_dict(),
        "replay": {"digest": summary.digest, "recorded_digest": recorded, "match": match, "mismatches": len(verifier.mismatches)},
    }
    _write_report(report, args, out)
    if summary.violation_total or not match or verifier.mismatches:
        return EXIT_VIOLATION
    return EXIT_OK


def stats(path) -> RunSummary:
    """Recompute the run summary of a trace file by replaying it under the checkers."""
    with open(path) as fh:
        text = fh.read()
    if not text.strip():
        return RunSummary(seed=0, config={}, violations={})
    trace = read_trace(io.StringIO(text))
    config = ScheduleConfig(**trace.header["config"])
    monitor = _monitor(config, trace.header["scenario"]["delta"])
    sim, _ = replay(trace, observers=[monitor])
    return summarize(sim, monitor)


def cmd_stats(args, out) -> int:
    summary = stats(args.trace)
    _write_report({"summary": summary.to_dict()}, args, out)
    return EXIT_VIOLATION if summary.violation_total else EXIT_OK


def _write_report(report: dict, args, out) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=dict)
    out.write(text + "\n")
    if getattr(args, "summary_out", None):
        with open(args.summary_out, "w") as fh:
            fh.write(text + "\n")


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localmutex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and check it")
    run.add_argument("--nodes", type=int, default=8)
    run.add_argument("--delta", type=int, default=None, help="ports per node (default 4)")
    run.add_argument("--k", type=int, default=8, help="priority range")
    run.add_argument("--mode", choices=["semisync", "async"], default="semisync")
    run.add_argument("--dmax", type=int, default=5, help="max execution duration in async mode")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--horizon", type=int, default=5000)
    run.add_argument("--fairness", type=int, default=16)
    run.add_argument("--p-add", dest="p_add", type=float, default=None)
    run.add_argument("--p-del", dest="p_del", type=float, default=None)
    run.add_argument("--scenario", metavar="FILE")
    run.add_argument("--trace-out", dest="trace_out", metavar="FILE")
    run.add_argument("--replay", metavar="FILE", help="replay a recorded trace instead of simulating")
    run.add_argument("--reduce-check", dest="reduce_check", action="store_true")
    run.add_argument("--app", choices=["popproto", "lockapi", "none"], default="lockapi")
    run.add_argument("--agent-program", dest="agent_program", metavar="FILE")
    run.add_argument("--strict-pseudocode", dest="strict_pseudocode", action="store_true")
    run.add_argument("--summary-out", dest="summary_out", metavar="FILE")
    run.set_defaults(func=cmd_run)

    st = sub.add_parser("stats", help="recompute a run summary from a trace")
    st.add_argument("trace")
    st.add_argument("--summary-out", dest="summary_out", metavar="FILE")
    st.set_defaults(func=cmd_stats)
    return parser


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args, out)
    except TraceParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
    except (ScenarioError, AgentProgramError, ReplayError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE
