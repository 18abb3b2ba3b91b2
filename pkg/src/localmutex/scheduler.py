"""Adversarial scheduler and simulation loop.

A :class:`Simulation` owns the world: the :class:`~localmutex.tvg.Topology`,
every node's protocol state, the per-node random streams and the pending
Lock/Unlock API calls.  Each call to :meth:`Simulation.step` executes one
round:

1. the adversary applies this round's topology changes;
2. registered hooks (application layers) may issue API calls;
3. the adversary plans activations from the start-of-round state, at most one
   action per free node, and all planned executions run;
4. observers (checkers) inspect the end-of-round world.

Messages sent in round ``r`` are deliverable from round ``r + 1`` on, so the
order in which the planned executions are applied inside a round does not
matter.  In asynchronous mode an execution started at round ``r`` keeps the
node busy for ``d`` rounds; its effects are computed from the snapshot taken at
its start, which is observationally the same as spreading them over the span.

The adversary is pluggable.  :class:`RandomAdversary` draws activations and
deliveries from a seeded stream and enforces weak fairness with aging
counters; :class:`ScriptedAdversary` replays a recorded trace.
"""

from __future__ import annotations

import enum
import graphlib
import hashlib
import io
import json
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

from . import protocol
from .protocol import ActionId, Effects, NodeState
from .tvg import InTransit, Scenario, Topology, random_dynamics


class Mode(str, enum.Enum):
    SEMI_SYNC = "semisync"
    ASYNC = "async"


class Activation(str, enum.Enum):
    ALL = "all"
    RANDOM_SUBSET = "random"
    SCRIPTED = "scripted"


class Delivery(str, enum.Enum):
    RANDOM = "random"
    OLDEST_FIRST = "oldest"
    SCRIPTED = "scripted"


class SchedulerError(Exception):
    pass


class HorizonExceeded(SchedulerError):
    pass


class CyclicCausality(SchedulerError):
    pass


class ReplayError(SchedulerError):
    pass


class TraceParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class ScheduleConfig:
    mode: Mode = Mode.SEMI_SYNC
    activation: Activation = Activation.RANDOM_SUBSET
    p_act: float = 0.7
    delivery: Delivery = Delivery.RANDOM
    fairness_bound: int = 16
    async_max_duration: int = 1
    seed: int = 0
    horizon: int = 5000
    k: int = protocol.DEFAULT_K
    strict_pseudocode: bool = False  # literal late-applicant handling (can deadlock)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.activation = Activation(self.activation)
        self.delivery = Delivery(self.delivery)
        if self.fairness_bound < 1:
            raise ValueError("fairness_bound must be >= 1")
        if self.async_max_duration < 1:
            raise ValueError("async_max_duration must be >= 1")
        if not 0.0 <= self.p_act <= 1.0:
            raise ValueError("p_act must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["activation"] = self.activation.value
        d["delivery"] = self.delivery.value
        return d


# -- traces ------------------------------------------------------------------

EVENT_KINDS = ("CONNECT", "DISCONNECT", "API_CALL", "DELIVERY", "ACTIVATION")

# Field order of each trace line after the common ``round, seq, kind`` prefix.
PAYLOAD_FIELDS = {
    "CONNECT": ("u", "v", "port_u", "port_v"),
    "DISCONNECT": ("u", "v", "port_u", "port_v", "lost"),
    "API_CALL": ("node", "op"),
    "DELIVERY": ("node", "port", "msg", "code"),
    "ACTIVATION": ("node", "exec", "action", "msg", "snapshot", "sends", "dropped", "result", "forced"),
}


@dataclass
class TraceEvent:
    round: int
    seq: int
    kind: str
    payload: dict = field(default_factory=dict)
    span: Optional[tuple] = None

    def to_json(self) -> str:
        rec = {"round": self.round, "seq": self.seq, "kind": self.kind}
        for name in PAYLOAD_FIELDS[self.kind]:
            rec[name] = self.payload[name]
        if self.span is not None:
            rec["span"] = list(self.span)
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_record(cls, rec: dict) -> "TraceEvent":
        kind = rec["kind"]
        if kind not in PAYLOAD_FIELDS:
            raise ValueError(f"unknown event kind {kind!r}")
        payload = {name: rec[name] for name in PAYLOAD_FIELDS[kind]}
        span = tuple(rec["span"]) if "span" in rec else None
        return cls(int(rec["round"]), int(rec["seq"]), kind, payload, span)


class TraceRecorder:
    """Collects trace lines; keeps events, a running digest and an optional stream."""

    def __init__(self, stream=None, keep: bool = True):
        self.stream = stream
        self.keep = keep
        self.events: list[TraceEvent] = []
        self._digest = hashlib.sha256()

    def write_meta(self, record: dict) -> None:
        self._write(json.dumps(record, separators=(",", ":"), sort_keys=True))

    def emit(self, event: TraceEvent) -> None:
        if self.keep:
            self.events.append(event)
        self._write(event.to_json())

    def _write(self, line: str) -> None:
        data = line + "\n"
        self._digest.update(data.encode())
        if self.stream is not None:
            self.stream.write(data)

    def hexdigest(self) -> str:
        return self._digest.hexdigest()


@dataclass
class Trace:
    header: dict
    events: list
    footer: Optional[dict] = None


def read_trace(source) -> Trace:
    """Parse a trace file (path or text stream) into header, events and footer."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source) as fh:
            return read_trace(fh)
    header, footer, events = None, None, []
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            kind = rec.get("kind")
            if kind == "HEADER":
                header = rec
            elif kind == "END":
                footer = rec
            else:
                events.append(TraceEvent.from_record(rec))
        except (ValueError, KeyError, TypeError) as exc:
            raise TraceParseError(str(exc), lineno) from exc
    if header is None:
        raise TraceParseError("missing HEADER record", 1)
    return Trace(header, events, footer)


# -- the world ----------------------------------------------------------------


@dataclass
class Execution:
    exec_id: int
    node: int
    action: ActionId
    item: Optional[InTransit]
    snapshot: frozenset
    before: NodeState
    after: NodeState
    effects: Effects
    start: int
    end: int
    forced: bool = False
    dropped: tuple = ()


@dataclass
class Planned:
    node: int
    action: ActionId
    item: Optional[InTransit]
    end: int
    forced: bool = False
    exec_id: Optional[int] = None


LOCK_OPS = ("lock", "lock_pair")


class Simulation:
    """One seeded run of the protocol against an adversary."""

    def __init__(
        self,
        scenario: Scenario,
        config: ScheduleConfig,
        adversary=None,
        trace: Optional[TraceRecorder] = None,
    ):
        self.scenario = scenario
        self.config = config
        n = scenario.node_count
        self.topology = Topology(n, scenario.delta)
        self.states = [NodeState() for _ in range(n)]
        self.node_rngs = [random.Random(f"{config.seed}:node:{u}") for u in range(n)]
        self.api: list[Optional[str]] = [None] * n
        self.busy_until = [0] * n
        self.round = 0
        self.exec_count = 0
        self.trace = trace
        self.hooks: list[Callable[["Simulation"], None]] = []
        self.observers: list = []
        self.adversary = adversary if adversary is not None else RandomAdversary(config, scenario)
        self._seq = 0
        if trace is not None:
            trace.write_meta({"kind": "HEADER", "config": config.to_dict(), "scenario": scenario.to_dict()})
        for u, v in scenario.edges:
            self.apply_edge_event("connect", u, v)

    @property
    def n(self) -> int:
        return self.scenario.node_count

    # -- driving -------------------------------------------------------------

    def step(self) -> None:
        if self.config.mode is Mode.ASYNC:
            self.step_async()
        else:
            self.step_round()

    def step_round(self) -> None:
        if self.config.mode is not Mode.SEMI_SYNC:
            raise SchedulerError("step_round requires semi-synchronous mode")
        self._step()

    def step_async(self) -> None:
        if self.config.mode is not Mode.ASYNC:
            raise SchedulerError("step_async requires asynchronous mode")
        self._step()

    def run(self, rounds: Optional[int] = None) -> "Simulation":
        remaining = self.config.horizon - self.round if rounds is None else rounds
        for _ in range(remaining):
            self._step()
        return self

    def _step(self) -> None:
        if self.round >= self.config.horizon:
            raise HorizonExceeded(f"horizon {self.config.horizon} reached")
        r = self.round + 1
        self.round = r
        self.topology.round = r
        self.adversary.apply_topology(self, r)
        for hook in self.hooks:
            hook(self)
        for u, op in self.adversary.api_calls(self, r):
            self.call(u, op)
        for planned in self.adversary.plan(self, r):
            self._execute(planned, r)
        for obs in self.observers:
            obs.on_round(self)

    # -- world mutation ----------------------------------------------------------

    def apply_edge_event(self, op: str, u: int, v: int) -> None:
        topo = self.topology
        if op == "connect":
            b = topo.connect(u, v)
            payload = {"u": u, "v": v, "port_u": b.port_of(u), "port_v": b.port_of(v)}
            self._emit("CONNECT", payload)
        elif op == "disconnect":
            pu, pv = topo.port_to(u, v), topo.port_to(v, u)
            lost = topo.disconnect(u, v)
            self._emit("DISCONNECT", {"u": u, "v": v, "port_u": pu, "port_v": pv, "lost": lost})
        else:
            raise ValueError(f"unknown edge op {op!r}")

    def call(self, u: int, op: str) -> None:
        """Register a Lock (``lock``/``lock_pair``) or Unlock (``unlock``) call at ``u``."""
        if op not in LOCK_OPS + ("unlock",):
            raise ValueError(f"unknown API op {op!r}")
        if self.api[u] is not None:
            raise SchedulerError(f"node {u} already has a pending {self.api[u]} call")
        self.api[u] = op
        self._emit("API_CALL", {"node": u, "op": op})

    def enabled(self, u: int) -> protocol.Enabled:
        api = self.api[u]
        return protocol.enabled_actions(
            self.states[u],
            self.topology.incoming(u),
            api in LOCK_OPS,
            api == "unlock",
            self.topology.detectors[u].pending,
            strict=self.config.strict_pseudocode,
        )

    def _execute(self, planned: Planned, r: int) -> Execution:
        topo = self.topology
        u, action, item = planned.node, ActionId(planned.action), planned.item
        if planned.exec_id is None:
            eid = self.exec_count
            self.exec_count += 1
        else:
            eid = planned.exec_id
            self.exec_count = max(self.exec_count, eid + 1)
        snap = topo.take_detector_snapshot(u)
        if item is not None:
            topo.consume(u, item)
            self._emit(
                "DELIVERY",
                {"node": u, "port": item.port, "msg": list(item.msg_id), "code": protocol.encode_message(item.message, self.config.k)},
            )
        targets = None
        api = self.api[u]
        if action is ActionId.INIT_LOCK:
            if api not in LOCK_OPS:
                raise protocol.NotEnabled(f"InitLock at {u} without a Lock call")
            if api == "lock_pair":
                targets = topo.bound_ports(u)[:1]
            self.api[u] = None
        elif action is ActionId.INIT_UNLOCK:
            if api != "unlock":
                raise protocol.NotEnabled(f"InitUnlock at {u} without an Unlock call")
            self.api[u] = None
        before = self.states[u]
        after, eff = protocol.execute(
            before,
            action,
            snap,
            item,
            self.node_rngs[u],
            ports=topo.ports[u].keys(),
            k=self.config.k,
            targets=targets,
            strict=self.config.strict_pseudocode,
        )
        dropped = []
        for i, (port, msg) in enumerate(eff.sends):
            if not topo.send(u, port, msg, msg_id=(eid, i), helper=i < eff.helper_sends):
                dropped.append(port)
        self.states[u] = after
        self.busy_until[u] = planned.end
        ex = Execution(eid, u, action, item, snap, before, after, eff, r, planned.end, planned.forced, tuple(dropped))
        if self.trace is not None:
            k = self.config.k
            self._emit(
                "ACTIVATION",
                {
                    "node": u,
                    "exec": eid,
                    "action": action.value,
                    "msg": None if item is None else list(item.msg_id),
                    "snapshot": sorted(snap),
                    "sends": [[p, protocol.encode_message(m, k)] for p, m in eff.sends],
                    "dropped": list(dropped),
                    "result": protocol.result_code(eff.api_result),
                    "forced": planned.forced,
                },
                span=(r, planned.end),
            )
        for obs in self.observers:
            on_exec = getattr(obs, "on_execution", None)
            if on_exec is not None:
                on_exec(self, ex)
        return ex

    def _emit(self, kind: str, payload: dict, span=None) -> None:
        if self.trace is None:
            return
        self.trace.emit(TraceEvent(self.round, self._seq, kind, payload, span))
        self._seq += 1

    # -- inspection --------------------------------------------------------------

    def digest(self) -> str:
        """Hash of the complete world state (protocol, topology, channels, randomness)."""
        topo = self.topology
        k = self.config.k
        channels = []
        for key in sorted(topo.channels):
            ch = topo.channels[key]
            channels.append(
                [list(key), [_item_repr(i, k) for i in ch.in_transit_ab], [_item_repr(i, k) for i in ch.in_transit_ba]]
            )
        world = {
            "round": self.round,
            "states": [s.as_dict() for s in self.states],
            "edges": [[b.node_a, b.port_a, b.node_b, b.port_b, b.since] for _, b in sorted(topo.edges.items())],
            "channels": channels,
            "loopback": [[_item_repr(i, k) for i in q] for q in topo.loopback],
            "detectors": [sorted(d.pending) for d in topo.detectors],
            "api": self.api,
            "busy": self.busy_until,
            "rng": [hashlib.sha256(repr(r.getstate()).encode()).hexdigest() for r in self.node_rngs],
        }
        return hashlib.sha256(json.dumps(world, sort_keys=True).encode()).hexdigest()

    def finish_trace(self) -> None:
        if self.trace is not None:
            self.trace.write_meta({"kind": "END", "round": self.round, "digest": self.digest()})


def _item_repr(item: InTransit, k: int) -> list:
    return [item.port, list(item.msg_id), protocol.encode_message(item.message, k), item.sent_round, item.sender]


# -- adversaries --------------------------------------------------------------


class RandomAdversary:
    """Seeded adversary constrained only by weak fairness with bound F.

    Each pending item of a node carries an age: the number of consecutive
    rounds (including the current one) during which it was available without
    being executed.  For a message, that is ``round - sent_round``; for a
    state-guarded action, the count of consecutive rounds it was enabled or
    pre-enabled.  A node is forced when its oldest items could not all be
    served within F rounds at one action per round (D_max rounds per action in
    asynchronous mode); the oldest item is then
    executed (a pre-enabled item is served by the CleanUp action, which makes
    it enabled for the following round, so it counts as two slots).
    """

    def __init__(self, config: ScheduleConfig, scenario: Scenario):
        self.config = config
        self.scenario = scenario
        seed = config.seed
        self.rng = random.Random(f"{seed}:sched")
        self.topo_rng = random.Random(f"{seed}:topology")
        self.ages: list[dict] = [dict() for _ in range(scenario.node_count)]
        self.max_age = 0

    def apply_topology(self, sim: Simulation, r: int) -> None:
        scripted = self.scenario.events_at(r)
        for _, op, u, v in scripted:
            sim.apply_edge_event(op, u, v)
        sc = self.scenario
        if sc.p_add > 0 or sc.p_del > 0:
            touched = {(min(u, v), max(u, v)) for _, _, u, v in scripted}
            for op, u, v in random_dynamics(sim.topology, self.topo_rng, sc.p_add, sc.p_del):
                if (u, v) not in touched:
                    sim.apply_edge_event(op, u, v)

    def api_calls(self, sim: Simulation, r: int) -> list:
        return []

    def plan(self, sim: Simulation, r: int) -> list[Planned]:
        cfg = self.config
        F = cfg.fairness_bound
        rng = self.rng
        dmax = cfg.async_max_duration if cfg.mode is Mode.ASYNC else 1
        activate_all = cfg.activation is Activation.ALL
        oldest = cfg.delivery is Delivery.OLDEST_FIRST
        out = []
        for u in range(sim.n):
            if sim.busy_until[u] >= r:
                continue
            en = sim.enabled(u)
            old = self.ages[u]
            ages = {}
            items = []  # (age, weight, action, item)
            for action, item in en.actions:
                if item is not None:
                    age = r - item.sent_round
                else:
                    age = old.get(action, 0) + 1
                    ages[action] = age
                items.append((age, 1, action, item))
            for action in en.pre_enabled:
                age = old.get(action, 0) + 1
                ages[action] = age
                items.append((age, 2, action, None))
            self.ages[u] = ages
            if not en.actions:
                continue
            items.sort(key=lambda x: -x[0])
            forced = False
            slots = 0
            for age, weight, _, _ in items:
                slots += weight
                # each execution ahead of this item may keep the node busy dmax rounds
                if age + (slots - 1) * dmax >= F:
                    forced = True
                    break
            if forced:
                _, weight, action, item = items[0]
                if weight == 2:
                    # pre-enabled: any execution runs CleanUp; prefer the CleanUp action
                    choices = [c for c in en.actions if c[0] is ActionId.CLEAN_UP] or en.actions
                    action, item = choices[0]
            elif activate_all or rng.random() < cfg.p_act:
                if oldest:
                    best = max(
                        range(len(en.actions)),
                        key=lambda i: (r - en.actions[i][1].sent_round) if en.actions[i][1] is not None else ages[en.actions[i][0]],
                    )
                    action, item = en.actions[best]
                else:
                    action, item = en.actions[rng.randrange(len(en.actions))]
            else:
                continue
            age_now = (r - item.sent_round) if item is not None else ages.get(action, 1)
            if age_now > self.max_age:
                self.max_age = age_now
            if item is None:
                ages.pop(action, None)
            d = rng.randint(1, dmax) if dmax > 1 else 1
            out.append(Planned(u, action, item, r + d - 1, forced))
        return out


class ScriptedAdversary:
    """Replays recorded topology changes, API calls and activations.

    Activations name the message they consume by its id
    ``(sender execution, send index)``; replay fails loudly if that message is
    not deliverable at the scripted round.
    """

    def __init__(self, events: Iterable[TraceEvent], collapse_spans: bool = False):
        self.topo = defaultdict(list)
        self.api = defaultdict(list)
        self.acts = defaultdict(list)
        self.expected = {}
        for ev in events:
            p = ev.payload
            if ev.kind in ("CONNECT", "DISCONNECT"):
                self.topo[ev.round].append((ev.kind.lower(), p["u"], p["v"]))
            elif ev.kind == "API_CALL":
                self.api[ev.round].append((p["node"], p["op"]))
            elif ev.kind == "ACTIVATION":
                end = ev.round if collapse_spans or ev.span is None else ev.span[1]
                msg = None if p["msg"] is None else tuple(p["msg"])
                self.acts[ev.round].append((p["node"], p["action"], msg, end, p["exec"], p.get("forced", False)))
                if "sends" in p:
                    self.expected[p["exec"]] = (p["sends"], p["result"])
        self.max_age = 0

    def apply_topology(self, sim: Simulation, r: int) -> None:
        for op, u, v in self.topo.get(r, ()):
            sim.apply_edge_event(op, u, v)

    def api_calls(self, sim: Simulation, r: int) -> list:
        return self.api.get(r, [])

    def plan(self, sim: Simulation, r: int) -> list[Planned]:
        out = []
        for node, action, msg, end, eid, forced in self.acts.get(r, []):
            item = None
            if msg is not None:
                for cand in sim.topology.incoming(node):
                    if cand.msg_id == msg:
                        item = cand
                        break
                else:
                    raise ReplayError(f"round {r}: message {msg} not deliverable to node {node}")
            if sim.busy_until[node] >= r:
                raise ReplayError(f"round {r}: node {node} is still busy")
            out.append(Planned(node, ActionId(action), item, end, forced, eid))
        return out


class ReplayVerifier:
    """Observer comparing each replayed execution's effects with the recording."""

    def __init__(self, expected: dict, k: int):
        self.expected = expected
        self.k = k
        self.mismatches: list[tuple] = []
        self.checked = 0

    def on_round(self, sim):
        pass

    def on_execution(self, sim, ex: Execution):
        want = self.expected.get(ex.exec_id)
        got = ([[p, protocol.encode_message(m, self.k)] for p, m in ex.effects.sends], protocol.result_code(ex.effects.api_result))
        self.checked += 1
        if want is None or [list(s) for s in want[0]] != got[0] or want[1] != got[1]:
            self.mismatches.append((ex.exec_id, want, got))


def effects_stream(events: Iterable[TraceEvent]) -> dict:
    """``exec id -> (sends, result)`` for every activation in a trace."""
    return {
        ev.payload["exec"]: (ev.payload["sends"], ev.payload["result"])
        for ev in events
        if ev.kind == "ACTIVATION"
    }


# -- replay and reduction -------------------------------------------------------


def _config_from_header(header: dict, **overrides) -> ScheduleConfig:
    cfg = dict(header["config"])
    cfg.update(overrides)
    return ScheduleConfig(**cfg)


def replay(trace: Trace, observers=(), mode: Optional[Mode] = None, record: bool = False) -> tuple[Simulation, ReplayVerifier]:
    """Re-run a recorded trace; returns the simulation and its effects verifier.

    ``mode`` overrides the recorded timing mode (used to replay a reduced
    asynchronous trace semi-synchronously).
    """
    overrides = {} if mode is None else {"mode": Mode(mode)}
    config = _config_from_header(trace.header, **overrides)
    scenario = Scenario.from_dict(trace.header["scenario"])
    scenario = Scenario(scenario.node_count, scenario.delta, scenario.edges)
    adversary = ScriptedAdversary(trace.events, collapse_spans=config.mode is Mode.SEMI_SYNC)
    recorder = TraceRecorder() if record else None
    sim = Simulation(scenario, config, adversary=adversary, trace=recorder)
    verifier = ReplayVerifier(adversary.expected, config.k)
    sim.observers.append(verifier)
    sim.observers.extend(observers)
    last = max((ev.round for ev in trace.events), default=0)
    if trace.footer is not None:
        last = max(last, int(trace.footer.get("round", last)))
    while sim.round < last:
        sim._step()
    return sim, verifier


def causal_order(events: Iterable[TraceEvent]) -> list[int]:
    """Topologically sort executions by program order and message causality."""
    execs = {}
    by_node = defaultdict(list)
    for ev in events:
        if ev.kind != "ACTIVATION":
            continue
        p = ev.payload
        execs[p["exec"]] = (ev.round, p["node"], None if p["msg"] is None else p["msg"][0])
        by_node[p["node"]].append((ev.round, p["exec"]))
    sorter = graphlib.TopologicalSorter()
    for eid, (start, node, src) in execs.items():
        sorter.add(eid)
        if src is not None:
            if src not in execs:
                raise CyclicCausality(f"execution {eid} consumes a message from unknown execution {src}")
            if execs[src][0] >= start:
                raise CyclicCausality(f"execution {eid} consumes a message sent at or after its start")
            sorter.add(eid, src)
    for node, seq in by_node.items():
        seq.sort()
        for (r0, a), (r1, b) in zip(seq, seq[1:]):
            if r0 == r1:
                raise CyclicCausality(f"node {node} runs two executions starting at round {r0}")
            sorter.add(b, a)
    try:
        return list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise CyclicCausality(str(exc)) from exc


def reduce_to_semisync(trace: Trace) -> Trace:
    """Turn an asynchronous trace into an equivalent semi-synchronous one.

    Executions keep their start rounds and take zero time; edge changes and API
    calls stay where they were.  Within each round executions are listed in a
    causal (topological) order.  Since every node runs at most one execution
    per start round, no filler rounds are needed to separate a node's actions.
    """
    order = causal_order(trace.events)
    rank = {eid: i for i, eid in enumerate(order)}
    rounds = defaultdict(lambda: {"topo": [], "api": [], "acts": []})
    deliveries = {}
    for ev in trace.events:
        slot = rounds[ev.round]
        if ev.kind in ("CONNECT", "DISCONNECT"):
            slot["topo"].append(ev)
        elif ev.kind == "API_CALL":
            slot["api"].append(ev)
        elif ev.kind == "ACTIVATION":
            slot["acts"].append(ev)
        elif ev.kind == "DELIVERY":
            deliveries[tuple(ev.payload["msg"])] = ev
    out = []
    seq = 0
    for r in sorted(rounds):
        slot = rounds[r]
        acts = []
        for ev in sorted(slot["acts"], key=lambda ev: rank[ev.payload["exec"]]):
            msg = ev.payload["msg"]
            if msg is not None and tuple(msg) in deliveries:
                acts.append(deliveries[tuple(msg)])
            acts.append(ev)
        for ev in slot["topo"] + slot["api"] + acts:
            span = (r, r) if ev.kind == "ACTIVATION" else None
            out.append(TraceEvent(r, seq, ev.kind, dict(ev.payload), span))
            seq += 1
    header = dict(trace.header)
    header["config"] = dict(header["config"], mode=Mode.SEMI_SYNC.value, async_max_duration=1)
    return Trace(header, out, trace.footer)


def reduction_check(trace: Trace) -> list[tuple]:
    """Reduce, replay semi-synchronously and diff effects; returns mismatches."""
    reduced = reduce_to_semisync(trace)
    _, verifier = replay(reduced)
    original = effects_stream(trace.events)
    mismatches = list(verifier.mismatches)
    if verifier.checked != len(original):
        mismatches.append(("count", len(original), verifier.checked))
    return mismatches


def trace_text(recorder_events: Iterable[TraceEvent], header: dict, footer: Optional[dict] = None) -> str:
    buf = io.StringIO()
    buf.write(json.dumps(header, separators=(",", ":"), sort_keys=True) + "\n")
    for ev in recorder_events:
        buf.write(ev.to_json() + "\n")
    if footer is not None:
        buf.write(json.dumps(footer, separators=(",", ":"), sort_keys=True) + "\n")
    return buf.getvalue()
