"""Time-varying graph with ports, disconnection detectors and lossy channels.

The adversary mutates the graph between rounds through ``connect`` and
``disconnect``.  Every edge lives in exactly one port on each endpoint for its
whole lifetime and owns a fresh :class:`Channel`; a reconnection of the same
pair gets a new binding and a new channel, so messages sent over an earlier
incarnation of the edge can never be delivered over a later one.

Port ``0`` is the loopback port.  It is never a :class:`PortBinding`; messages
sent on it go to a per-node queue that is never lost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import yaml


class TopologyError(Exception):
    pass


class NoOpenPort(TopologyError):
    pass


class AlreadyAdjacent(TopologyError):
    pass


class NotAdjacent(TopologyError):
    pass


class PresenceConflict(TopologyError):
    """A pair changed presence twice within one round boundary."""


class DuplicateSendOnPort(TopologyError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class PortBinding:
    node_a: int
    port_a: int
    node_b: int
    port_b: int
    since: int

    def port_of(self, node: int) -> int:
        if node == self.node_a:
            return self.port_a
        if node == self.node_b:
            return self.port_b
        raise KeyError(node)

    def peer_of(self, node: int) -> int:
        if node == self.node_a:
            return self.node_b
        if node == self.node_b:
            return self.node_a
        raise KeyError(node)

    @property
    def pair(self) -> tuple[int, int]:
        return (self.node_a, self.node_b)


class InTransit(NamedTuple):
    """A message on its way; ``port`` is the receiver's label for the sender."""

    port: int
    message: object
    msg_id: tuple  # (sender execution id, index of the send in that execution)
    sent_round: int
    sender: int


@dataclass
class Channel:
    edge: PortBinding
    in_transit_ab: list = field(default_factory=list)
    in_transit_ba: list = field(default_factory=list)

    def towards(self, node: int) -> list:
        return self.in_transit_ab if node == self.edge.node_b else self.in_transit_ba

    def __len__(self):
        return len(self.in_transit_ab) + len(self.in_transit_ba)


@dataclass
class Detector:
    pending: set = field(default_factory=set)


def _pair(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


class Topology:
    """Current snapshot of the time-varying graph plus its presence history."""

    def __init__(self, node_count: int, delta: int):
        if node_count < 1 or delta < 1:
            raise ValueError("node_count and delta must be positive")
        self.node_count = node_count
        self.delta = delta
        self.round = 0
        self.ports: list[dict[int, PortBinding]] = [{} for _ in range(node_count)]
        self.edges: dict[tuple[int, int], PortBinding] = {}
        self.channels: dict[tuple[int, int], Channel] = {}
        self.loopback: list[list[InTransit]] = [[] for _ in range(node_count)]
        self.detectors = [Detector() for _ in range(node_count)]
        self.presence_log: list[tuple[int, str, PortBinding]] = []
        # pair -> list of [since, until) intervals, until None while present
        self.intervals: dict[tuple[int, int], list[list]] = {}
        self._last_change: dict[tuple[int, int], int] = {}
        self._sent_ports: list[Optional[set]] = [None] * node_count
        self.messages_sent = 0
        self.messages_lost = 0
        self.messages_dropped_unbound = 0

    # -- adversary operations ------------------------------------------------

    def connect(self, u: int, v: int) -> PortBinding:
        self._check_node(u)
        self._check_node(v)
        if u == v:
            raise TopologyError("self-loops are not edges")
        key = _pair(u, v)
        if key in self.edges:
            raise AlreadyAdjacent(f"{u} and {v} are already adjacent")
        pu = self._open_port(u)
        pv = self._open_port(v)
        if pu is None or pv is None:
            raise NoOpenPort(f"no open port on {u if pu is None else v}")
        self._claim_change(key)
        a, b = key
        pa, pb = (pu, pv) if a == u else (pv, pu)
        binding = PortBinding(a, pa, b, pb, self.round)
        self.edges[key] = binding
        self.channels[key] = Channel(binding)
        self.ports[u][pu] = binding
        self.ports[v][pv] = binding
        self.presence_log.append((self.round, "connect", binding))
        self.intervals.setdefault(key, []).append([self.round, None])
        return binding

    def disconnect(self, u: int, v: int) -> int:
        """Sever ``{u, v}``; returns how many in-transit messages were lost."""
        key = _pair(u, v)
        binding = self.edges.get(key)
        if binding is None:
            raise NotAdjacent(f"{u} and {v} are not adjacent")
        self._claim_change(key)
        channel = self.channels.pop(key)
        lost = len(channel)
        self.messages_lost += lost
        channel.in_transit_ab.clear()
        channel.in_transit_ba.clear()
        del self.edges[key]
        del self.ports[binding.node_a][binding.port_a]
        del self.ports[binding.node_b][binding.port_b]
        self.detectors[binding.node_a].pending.add(binding.port_a)
        self.detectors[binding.node_b].pending.add(binding.port_b)
        self.presence_log.append((self.round, "disconnect", binding))
        self.intervals[key][-1][1] = self.round
        return lost

    def can_connect(self, u: int, v: int) -> bool:
        return (
            u != v
            and _pair(u, v) not in self.edges
            and len(self.ports[u]) < self.delta
            and len(self.ports[v]) < self.delta
            and self._last_change.get(_pair(u, v)) != self.round
        )

    # -- node-side operations ------------------------------------------------

    def take_detector_snapshot(self, u: int) -> frozenset:
        """Return and reset ``u``'s pending disconnections; starts an execution."""
        det = self.detectors[u]
        snap = frozenset(det.pending)
        det.pending.clear()
        self._sent_ports[u] = set()
        return snap

    def send(self, u: int, port: int, message, msg_id=None, sender_exec=None, helper: bool = False) -> bool:
        """Put ``message`` in transit from ``u`` via ``port``; False if dropped.

        ``helper`` marks a send made by the CleanUp helper, which has its own
        one-per-port allowance within the execution.
        """
        used = self._sent_ports[u]
        if used is not None:
            key = (port, helper)
            if key in used:
                raise DuplicateSendOnPort(f"node {u} already sent on port {port}")
            used.add(key)
        if msg_id is None:
            msg_id = (sender_exec, port)
        self.messages_sent += 1
        if port == 0:
            self.loopback[u].append(InTransit(0, message, msg_id, self.round, u))
            return True
        binding = self.ports[u].get(port)
        if binding is None:
            self.messages_dropped_unbound += 1
            return False
        v = binding.peer_of(u)
        item = InTransit(binding.port_of(v), message, msg_id, self.round, u)
        self.channels[_pair(u, v)].towards(v).append(item)
        return True

    def incoming(self, u: int) -> list[InTransit]:
        """Messages currently deliverable to ``u`` (loopback first, then by port)."""
        items = list(self.loopback[u])
        ports = self.ports[u]
        for p in sorted(ports):
            b = ports[p]
            items.extend(self.channels[_pair(b.node_a, b.node_b)].towards(u))
        return items

    def consume(self, u: int, item: InTransit) -> None:
        if item.port == 0:
            self.loopback[u].remove(item)
            return
        b = self.ports[u].get(item.port)
        if b is None:
            raise NotAdjacent(f"port {item.port} of {u} is unbound")
        self.channels[_pair(b.node_a, b.node_b)].towards(u).remove(item)

    def neighborhood(self, u: int) -> set[tuple[int, int]]:
        return {(p, b.peer_of(u)) for p, b in self.ports[u].items()}

    def bound_ports(self, u: int) -> list[int]:
        return sorted(self.ports[u])

    def peer(self, u: int, port: int) -> Optional[int]:
        if port == 0:
            return u
        b = self.ports[u].get(port)
        return None if b is None else b.peer_of(u)

    def port_to(self, u: int, v: int) -> Optional[int]:
        b = self.edges.get(_pair(u, v))
        return None if b is None else b.port_of(u)

    def adjacent(self, u: int, v: int) -> bool:
        return _pair(u, v) in self.edges

    def channel(self, u: int, v: int) -> Optional[Channel]:
        return self.channels.get(_pair(u, v))

    # -- history -------------------------------------------------------------

    def present_throughout(self, u: int, v: int, start: int, end: int) -> bool:
        """Whether ``{u, v}`` existed at every round in ``[start, end]``."""
        for since, until in reversed(self.intervals.get(_pair(u, v), ())):
            if since <= start:
                return until is None or until > end
        return False

    def neighbors_at(self, u: int, rnd: int) -> set[int]:
        """``N_rnd(u)`` reconstructed from the presence intervals."""
        out = set()
        for (a, b), spans in self.intervals.items():
            if u not in (a, b):
                continue
            for since, until in spans:
                if since <= rnd and (until is None or until > rnd):
                    out.add(b if a == u else a)
                    break
        return out

    # -- invariants ----------------------------------------------------------

    def check_invariants(self) -> None:
        bound = sum(len(p) for p in self.ports)
        if bound != 2 * len(self.edges):
            raise AssertionError(f"port conservation: {bound} != 2*{len(self.edges)}")
        for u, ports in enumerate(self.ports):
            if len(ports) > self.delta:
                raise AssertionError(f"node {u} has {len(ports)} > delta ports")
            for p, b in ports.items():
                if not 1 <= p <= self.delta or b.port_of(u) != p:
                    raise AssertionError(f"bad binding {b} at {u}:{p}")
                if self.edges.get(b.pair) is not b:
                    raise AssertionError(f"binding {b} not in edge set")

    # -- helpers -------------------------------------------------------------

    def _open_port(self, u: int) -> Optional[int]:
        used = self.ports[u]
        for p in range(1, self.delta + 1):
            if p not in used:
                return p
        return None

    def _claim_change(self, key) -> None:
        if self._last_change.get(key) == self.round and self.round > 0:
            raise PresenceConflict(f"pair {key} already changed in round {self.round}")
        self._last_change[key] = self.round

    def _check_node(self, u: int) -> None:
        if not 0 <= u < self.node_count:
            raise TopologyError(f"unknown node {u}")


def random_dynamics(topology: Topology, rng, p_add: float, p_del: float) -> list[tuple[str, int, int]]:
    """Draw one round of edge changes: drops first, then capacity-respecting adds.

    Each present edge drops with probability ``p_del`` and each absent pair
    connects with probability ``p_add``.  Pairs are visited in a fixed order so
    the outcome depends only on the random stream.  Returns the planned
    ``("connect"|"disconnect", u, v)`` events without applying them.
    """
    events = []
    degree = [len(p) for p in topology.ports]
    dropped = set()
    if p_del > 0:
        for key in sorted(topology.edges):
            if rng.random() < p_del:
                events.append(("disconnect",) + key)
                dropped.add(key)
                degree[key[0]] -= 1
                degree[key[1]] -= 1
    if p_add > 0:
        n, delta = topology.node_count, topology.delta
        edges = topology.edges
        for u in range(n):
            for v in range(u + 1, n):
                if rng.random() >= p_add:
                    continue
                key = (u, v)
                if key in edges or key in dropped:
                    continue
                if degree[u] >= delta or degree[v] >= delta:
                    continue
                events.append(("connect", u, v))
                degree[u] += 1
                degree[v] += 1
    return events


@dataclass
class Scenario:
    """Graph setup: size, capacity, initial edges, scripted and random dynamics.

    File schema (JSON or YAML)::

        nodes: 8            # node_count
        delta: 4            # ports per node
        edges: [[0, 1], [1, 2]]
        events:             # optional scripted changes
          - {round: 5, op: disconnect, u: 0, v: 1}
        dynamics: {p_add: 0.05, p_del: 0.05}   # optional random changes
    """

    node_count: int
    delta: int
    edges: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (round, op, u, v)
    p_add: float = 0.0
    p_del: float = 0.0

    def __post_init__(self):
        if self.node_count < 1 or self.delta < 1:
            raise ScenarioError("nodes and delta must be positive")
        for p in (self.p_add, self.p_del):
            if not 0.0 <= p <= 1.0:
                raise ScenarioError(f"probability {p} outside [0, 1]")
        for ev in self.events:
            if ev[0] < 1:
                raise ScenarioError(f"scripted event {ev} must be at round >= 1")
            if ev[1] not in ("connect", "disconnect"):
                raise ScenarioError(f"unknown op {ev[1]!r}")

    def events_at(self, rnd: int) -> list:
        return [e for e in self.events if e[0] == rnd]

    def to_dict(self) -> dict:
        return {
            "nodes": self.node_count,
            "delta": self.delta,
            "edges": [list(e) for e in self.edges],
            "events": [{"round": r, "op": op, "u": u, "v": v} for r, op, u, v in self.events],
            "dynamics": {"p_add": self.p_add, "p_del": self.p_del},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        if not isinstance(data, dict):
            raise ScenarioError("scenario must be a mapping")
        try:
            dyn = data.get("dynamics") or {}
            events = [
                (int(e["round"]), str(e["op"]), int(e["u"]), int(e["v"]))
                for e in data.get("events") or []
            ]
            return cls(
                node_count=int(data["nodes"]),
                delta=int(data["delta"]),
                edges=[(int(a), int(b)) for a, b in data.get("edges") or []],
                events=sorted(events, key=lambda e: e[0]),
                p_add=float(dyn.get("p_add", 0.0)),
                p_del=float(dyn.get("p_del", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"malformed scenario: {exc}") from exc


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        if str(path).endswith(".json"):
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return Scenario.from_dict(data)
