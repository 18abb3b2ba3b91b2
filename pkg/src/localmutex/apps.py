"""Applications built on Lock/Unlock.

* :class:`RepeatedLocking` keeps every node cycling Lock -> hold -> Unlock.
* :class:`PopulationLayer` realizes isolated pairwise interactions of a
  population protocol: after a successful Lock an agent interacts with one
  locked neighbor, then unlocks.
* :class:`LockClient` exposes Lock/Unlock as operations that block in
  simulation time until the protocol reports completion.

All three attach to a :class:`~localmutex.scheduler.Simulation` as a
before-round hook and/or observer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import yaml

from .checker import Monitor, Violation
from .protocol import ActionId, LockState, LockSucceeded, RequestRejected
from .scheduler import ScheduleConfig, Simulation
from .tvg import Scenario


class Busy(RuntimeError):
    """Lock/Unlock called out of order for a node."""


class AgentProgramError(ValueError):
    pass


class RepeatedLocking:
    """Every node re-issues Lock after each Unlock until ``cutoff``.

    A node unlocks ``hold`` rounds after its Lock succeeds.  No new Lock is
    issued after round ``cutoff`` so outstanding requests can drain.
    """

    def __init__(self, cutoff: Optional[int] = None, hold: int = 1, nodes: Optional[Sequence[int]] = None):
        self.cutoff = cutoff
        self.hold = hold
        self.nodes = nodes
        self._locked_at: dict[int, int] = {}

    def attach(self, sim: Simulation) -> "RepeatedLocking":
        sim.hooks.append(self.before_round)
        sim.observers.append(self)
        return self

    def before_round(self, sim: Simulation) -> None:
        r = sim.round
        nodes = range(sim.n) if self.nodes is None else self.nodes
        for u in nodes:
            if sim.api[u] is not None:
                continue
            st = sim.states[u].state
            if st is None:
                if self.cutoff is None or r <= self.cutoff:
                    sim.call(u, "lock")
            elif st is LockState.LOCKED and r - self._locked_at.get(u, r) >= self.hold:
                sim.call(u, "unlock")

    def on_execution(self, sim, ex) -> None:
        if ex.action is ActionId.CHECK_DONE:
            self._locked_at[ex.node] = ex.start

    def on_round(self, sim) -> None:
        pass


# -- population protocols ------------------------------------------------------------


@dataclass
class AgentProgram:
    """Finite-state agents updated by a total pairwise transition function."""

    state_count: int
    transition: Callable[[int, int], tuple[int, int]]
    names: Optional[list] = None

    def __post_init__(self):
        for a in range(self.state_count):
            for b in range(self.state_count):
                out = self.transition(a, b)
                if len(out) != 2 or not all(0 <= x < self.state_count for x in out):
                    raise AgentProgramError(f"transition({a}, {b}) = {out} leaves the state space")

    @classmethod
    def from_table(cls, states: Sequence[str], rules: Sequence[Sequence[str]]) -> "AgentProgram":
        """Build from named states and ``[a, b, a', b']`` rules; unlisted pairs are no-ops."""
        index = {name: i for i, name in enumerate(states)}
        if len(index) != len(states):
            raise AgentProgramError("duplicate state names")
        table = {}
        for rule in rules:
            if len(rule) != 4:
                raise AgentProgramError(f"rule {rule} must have four entries")
            try:
                a, b, a2, b2 = (index[x] for x in rule)
            except KeyError as exc:
                raise AgentProgramError(f"unknown state {exc.args[0]!r}") from None
            if (a, b) in table:
                raise AgentProgramError(f"duplicate rule for ({rule[0]}, {rule[1]})")
            table[(a, b)] = (a2, b2)
        return cls(len(states), lambda a, b: table.get((a, b), (a, b)), list(states))

    def state_index(self, name) -> int:
        if isinstance(name, int):
            return name
        return self.names.index(name)


def load_agent_program(path) -> AgentProgram:
    """Read a transition table file.

    Schema (YAML or JSON)::

        states: [susceptible, informed]
        rules:
          - [informed, susceptible, informed, informed]
          - [susceptible, informed, informed, informed]
    """
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict) or "states" not in data:
        raise AgentProgramError(f"{path}: expected a mapping with 'states'")
    return AgentProgram.from_table(data["states"], data.get("rules") or [])


RUMOR = AgentProgram.from_table(
    ["susceptible", "informed"],
    [
        ["informed", "susceptible", "informed", "informed"],
        ["susceptible", "informed", "informed", "informed"],
    ],
)


@dataclass
class InteractionRecord:
    start: int
    initiator: int
    responder: int
    before: tuple
    after: tuple
    end: Optional[int] = None  # round the initiator began unlocking


class PopulationLayer:
    """Each agent loops Lock -> interact with one locked neighbor -> Unlock.

    The partner is the locked neighbor on the lowest port label.  With
    ``lock_pair_only`` the agent picks that neighbor first and locks only
    itself and it.  If no neighbor ends up locked, no interaction happens.
    """

    def __init__(self, program: AgentProgram, states: Sequence[int], lock_pair_only: bool = False, cutoff: Optional[int] = None):
        self.program = program
        self.agent_states = list(states)
        self.lock_pair_only = lock_pair_only
        self.cutoff = cutoff
        self.interactions: list[InteractionRecord] = []
        self.solo_locks = 0
        self.violations: list[Violation] = []
        self._open: dict[int, InteractionRecord] = {}
        self._unlock: set[int] = set()
        self.stopped = False

    def attach(self, sim: Simulation) -> "PopulationLayer":
        if len(self.agent_states) != sim.n:
            raise ValueError("one agent state per node required")
        sim.hooks.append(self.before_round)
        sim.observers.append(self)
        return self

    def before_round(self, sim: Simulation) -> None:
        op = "lock_pair" if self.lock_pair_only else "lock"
        for u in range(sim.n):
            if sim.api[u] is not None:
                continue
            st = sim.states[u].state
            if st is None and not self.stopped and (self.cutoff is None or sim.round <= self.cutoff):
                sim.call(u, op)
            elif st is LockState.LOCKED and u in self._unlock:
                self._unlock.discard(u)
                sim.call(u, "unlock")

    def on_execution(self, sim: Simulation, ex) -> None:
        u = ex.node
        if ex.action is ActionId.CHECK_DONE:
            ports = sorted(l for l in ex.effects.api_result.ports if l != 0)
            self._unlock.add(u)
            if not ports:
                self.solo_locks += 1
                return
            v = sim.topology.peer(u, ports[0])
            a, b = self.agent_states[u], self.agent_states[v]
            a2, b2 = self.program.transition(a, b)
            self.agent_states[u], self.agent_states[v] = a2, b2
            rec = InteractionRecord(ex.start, u, v, (a, b), (a2, b2))
            self.interactions.append(rec)
            self._open[u] = rec
            self._check_isolated(sim, rec)
        elif ex.action is ActionId.INIT_UNLOCK:
            rec = self._open.pop(u, None)
            if rec is not None:
                rec.end = ex.start

    def on_round(self, sim: Simulation) -> None:
        seen: dict[int, int] = {}
        topo = sim.topology
        for u, rec in self._open.items():
            v = rec.responder
            if not topo.present_throughout(u, v, rec.start, sim.round):
                continue
            self._check_isolated(sim, rec)
            for x in (u, v):
                if x in seen:
                    self.violations.append(
                        Violation("matching", sim.round, f"node {x} in interactions of {seen[x]} and {u}")
                    )
                seen[x] = u

    def _check_isolated(self, sim: Simulation, rec: InteractionRecord) -> None:
        u, v = rec.initiator, rec.responder
        port_v = sim.topology.port_to(v, u)
        if sim.states[u].lock != 0 or port_v is None or sim.states[v].lock != port_v:
            self.violations.append(
                Violation("isolation", sim.round, f"interaction {u}-{v} without both locks held")
            )

    def interactions_by_round(self) -> dict[int, list[InteractionRecord]]:
        out: dict[int, list] = {}
        for rec in self.interactions:
            out.setdefault(rec.start, []).append(rec)
        return out


@dataclass
class PopulationResult:
    interactions: list
    final_states: list
    violations: list
    rounds: int
    monitor: Monitor
    solo_locks: int = 0


def run_population(
    program: AgentProgram,
    scenario: Scenario,
    config: ScheduleConfig,
    initial_states: Sequence,
    lock_pair_only: bool = False,
    stop_when: Optional[Callable[[list], bool]] = None,
    check_dag: bool = False,
) -> PopulationResult:
    """Run agents over the dynamic graph until the horizon or ``stop_when(states)``."""
    sim = Simulation(scenario, config)
    monitor = Monitor(check_dag=check_dag)
    sim.observers.append(monitor)
    layer = PopulationLayer(program, [program.state_index(s) for s in initial_states], lock_pair_only).attach(sim)
    while sim.round < config.horizon:
        sim.step()
        if stop_when is not None and stop_when(layer.agent_states):
            break
    return PopulationResult(
        layer.interactions,
        list(layer.agent_states),
        monitor.violations + layer.violations,
        sim.round,
        monitor,
        layer.solo_locks,
    )


# -- blocking client API -----------------------------------------------------------------


@dataclass
class Handle:
    node: int
    op: str
    done: bool = False
    result: object = None


class LockClient:
    """Lock/Unlock calls that block, in simulation rounds, until completion.

    ``request_lock``/``request_unlock`` start an operation and return a handle;
    ``wait`` steps the simulation until the given handles complete.
    ``client_lock`` and ``client_unlock`` combine the two.
    """

    def __init__(self, sim: Simulation):
        self.sim = sim
        self._pending: dict[int, Handle] = {}
        self.held: dict[int, frozenset] = {}
        sim.observers.append(self)

    def request_lock(self, u: int, pair_only: bool = False) -> Handle:
        if u in self._pending or u in self.held or self.sim.states[u].state is not None:
            raise Busy(f"node {u} is not idle")
        self.sim.call(u, "lock_pair" if pair_only else "lock")
        h = self._pending[u] = Handle(u, "lock")
        return h

    def request_unlock(self, u: int) -> Handle:
        if u in self._pending or u not in self.held:
            raise Busy(f"node {u} holds no completed lock")
        self.sim.call(u, "unlock")
        h = self._pending[u] = Handle(u, "unlock")
        return h

    def wait(self, *handles: Handle, max_rounds: Optional[int] = None) -> list:
        start = self.sim.round
        while not all(h.done for h in handles):
            if max_rounds is not None and self.sim.round - start >= max_rounds:
                raise TimeoutError(f"operations still pending after {max_rounds} rounds")
            self.sim.step()
        return [h.result for h in handles]

    def client_lock(self, u: int, **kw) -> frozenset:
        (res,) = self.wait(self.request_lock(u), **kw)
        return res

    def client_unlock(self, u: int, **kw) -> None:
        self.wait(self.request_unlock(u), **kw)

    def on_execution(self, sim: Simulation, ex) -> None:
        h = self._pending.get(ex.node)
        if h is None:
            return
        res = ex.effects.api_result
        if isinstance(res, RequestRejected):
            self._pending.pop(ex.node)
            raise Busy(f"node {ex.node} rejected {h.op}")
        if h.op == "lock" and isinstance(res, LockSucceeded):
            nodes = frozenset(sim.topology.peer(ex.node, l) for l in res.ports)
            self.held[ex.node] = nodes
            h.result, h.done = nodes, True
            self._pending.pop(ex.node)
        elif h.op == "unlock" and ex.action is ActionId.CHECK_UNLOCKED:
            self.held.pop(ex.node, None)
            h.done = True
            self._pending.pop(ex.node)

    def on_round(self, sim) -> None:
        pass
