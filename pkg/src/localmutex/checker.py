"""Runtime monitors for the local mutual exclusion properties.

Checkers observe a :class:`~localmutex.scheduler.Simulation` from outside with
global visibility and never feed anything back into it.  Each ``check_*``
function inspects one world snapshot; :class:`Monitor` wires them into the
simulation loop and keeps the per-request bookkeeping.
"""

from __future__ import annotations

import graphlib
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy import stats

from . import protocol
from .protocol import ActionId, LockState, MsgKind, NodeState, Phase

# Verdicts of check_success.
PENDING = "pending"
SUCCEEDED = "succeeded"
ANOMALY = "anomaly"


class InsufficientSamples(ValueError):
    pass


@dataclass
class Violation:
    kind: str
    round: int
    detail: str

    def __str__(self):
        return f"[{self.kind}] round {self.round}: {self.detail}"


@dataclass
class LockRequestRecord:
    node: int
    issue_round: int
    neighbors_at_issue: frozenset
    success_round: Optional[int] = None
    done_round: Optional[int] = None
    trials: int = 0
    anomaly: Optional[str] = None

    @property
    def latency(self) -> Optional[int]:
        return None if self.success_round is None else self.success_round - self.issue_round


# -- lock sets and mutual exclusion -----------------------------------------------


def lock_sets(sim) -> dict[int, set[int]]:
    """Lock set of every node, read off the lock variables and port bindings.

    A lock naming a port whose disconnection ``v`` has not yet processed
    points at a dead edge, even if the adversary already bound a new
    neighbor to that label; such locks are skipped.
    """
    topo = sim.topology
    sets: dict[int, set[int]] = {u: set() for u in range(sim.n)}
    for v, s in enumerate(sim.states):
        lk = s.lock
        if lk is None:
            continue
        if lk == 0:
            sets[v].add(v)
            continue
        if lk in topo.detectors[v].pending:
            continue
        b = topo.ports[v].get(lk)
        if b is not None:
            sets[b.peer_of(v)].add(v)
    return sets


def check_mutual_exclusion(sets: Mapping[int, Iterable[int]], rnd: int = 0) -> list[Violation]:
    """Report every node that belongs to two lock sets."""
    owner: dict[int, int] = {}
    out = []
    for u in sorted(sets):
        for v in sorted(sets[u]):
            if v in owner:
                out.append(Violation("mutual_exclusion", rnd, f"node {v} in lock sets of {owner[v]} and {u}"))
            else:
                owner[v] = u
    return out


def check_held_locks(sim) -> list[Violation]:
    """Every LOCKED initiator still holds each live, unreported member of its L."""
    topo = sim.topology
    out = []
    for u, s in enumerate(sim.states):
        if s.state is not LockState.LOCKED:
            continue
        pending = topo.detectors[u].pending
        for l in s.L:
            if l == 0:
                if sim.states[u].lock != 0:
                    out.append(Violation("held_lock", sim.round, f"node {u} LOCKED but lock(u)={s.lock}"))
                continue
            if l in pending:
                continue
            b = topo.ports[u].get(l)
            if b is None:
                out.append(Violation("held_lock", sim.round, f"node {u} port {l} unbound without detection"))
                continue
            w = b.peer_of(u)
            if sim.states[w].lock != b.port_of(w):
                out.append(Violation("held_lock", sim.round, f"node {u} LOCKED but neighbor {w} has lock={sim.states[w].lock}"))
    return out


# -- persistent-neighborhood success ------------------------------------------------


def persistent_set(sim, record: LockRequestRecord, rnd: int) -> set[int]:
    """``{u}`` plus the issue-round neighbors present at every round up to ``rnd``."""
    topo = sim.topology
    u, i = record.node, record.issue_round
    return {u} | {v for v in record.neighbors_at_issue if topo.present_throughout(u, v, i, rnd)}


def check_success(record: LockRequestRecord, sim, sets=None) -> tuple:
    """Advance one record by one round; returns ``(verdict, round or detail)``."""
    if record.anomaly is not None:
        return ANOMALY, record.anomaly
    if record.success_round is not None:
        return SUCCEEDED, record.success_round
    rnd = sim.round
    if rnd <= record.issue_round:
        return PENDING, None
    sets = lock_sets(sim) if sets is None else sets
    if sets[record.node] == persistent_set(sim, record, rnd):
        record.success_round = rnd
        return SUCCEEDED, rnd
    return PENDING, None


def check_done(record: LockRequestRecord, sim, ports: Iterable[int]) -> Optional[str]:
    """Compare the locked port set reported by CheckDone with the persistent set."""
    topo = sim.topology
    u = record.node
    claimed = set()
    for l in ports:
        v = topo.peer(u, l)
        if v is None:
            return f"CheckDone at {u} reports unbound port {l}"
        claimed.add(v)
    required = persistent_set(sim, record, sim.round)
    if claimed != required:
        extra = sorted(claimed - required)
        missing = sorted(required - claimed)
        return f"node {u} locked {sorted(claimed)}; non-persistent {extra}, missing {missing}"
    return None


# -- channels ------------------------------------------------------------------------


def check_channel_bound(sim, bound: int = 2) -> list[Violation]:
    out = []
    for key, ch in sim.topology.channels.items():
        if len(ch) > bound:
            out.append(Violation("channel_bound", sim.round, f"edge {key} carries {len(ch)} messages"))
    return out


# -- dependency graph ------------------------------------------------------------------


def _requests_in_flight(sim, u: int, v: int) -> bool:
    topo = sim.topology
    queue = topo.loopback[u] if u == v else topo.channels[(min(u, v), max(u, v))].towards(v)
    return any(it.message.kind is MsgKind.REQUEST_LOCK and it.sender == u for it in queue)


def _wins_in_flight(sim, v: int, u: int) -> bool:
    topo = sim.topology
    queue = topo.loopback[u] if u == v else topo.channels[(min(u, v), max(u, v))].towards(u)
    return any(it.message.kind is MsgKind.WIN and it.sender == v for it in queue)


def dependency_graph(sim, in_flight: bool = False) -> dict:
    """Directed waits-for graph between competing initiators and participants.

    Vertices are ``("I", u)`` for initiators in COMPETE and ``("P", v)`` for
    their participants.  ``P v -> I u`` while ``v`` owes ``u`` a win reply to
    its latest request; ``I u -> P v`` while ``u`` owes ``v`` a new request
    after the latest win reply.

    A node owes a reply once it holds the message: the request sits in
    ``P(v)`` or the win in ``W(u)``.  With ``in_flight`` a message still in
    transit already creates the obligation; that reading admits short-lived
    cycles that dissolve on delivery.
    """
    topo = sim.topology
    graph: dict = {}
    for u, s in enumerate(sim.states):
        if s.state is not LockState.COMPETE:
            continue
        iu = ("I", u)
        graph.setdefault(iu, set())
        pending = topo.detectors[u].pending
        w_labels = {l for l, _ in s.W}
        for l in s.L:
            if l in pending:
                continue
            if l == 0:
                v, lv = u, 0
            else:
                b = topo.ports[u].get(l)
                if b is None:
                    continue
                v = b.peer_of(u)
                lv = b.port_of(v)
            pv = ("P", v)
            graph.setdefault(pv, set())
            p_labels = {pl for pl, _ in sim.states[v].P}
            if lv in p_labels or (in_flight and _requests_in_flight(sim, u, v)):
                graph[pv].add(iu)
            elif l in w_labels or (in_flight and _wins_in_flight(sim, v, u)):
                graph[iu].add(pv)
    return graph


def find_cycle(graph: Mapping) -> Optional[list]:
    sorter = graphlib.TopologicalSorter({node: set() for node in graph})
    for src, dsts in graph.items():
        for dst in dsts:
            sorter.add(dst, src)
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        return list(exc.args[1])
    return None


def check_dependency_dag(sim) -> list[Violation]:
    cycle = find_cycle(dependency_graph(sim))
    if cycle is None:
        return []
    return [Violation("dag_cycle", sim.round, f"cycle {cycle}")]


# -- open-trial statistics ----------------------------------------------------------------


def open_trial_bound(delta: int, k: int) -> float:
    """Lower bound on the chance an initiator wins an open trial."""
    c = delta * delta
    return (1.0 - 1.0 / k) ** (2 * c) / (2 * c)


def wilson_interval(successes: int, n: int, confidence: float = 0.99, one_sided: bool = False) -> tuple[float, float]:
    if n <= 0:
        raise InsufficientSamples("no samples")
    alpha = 1.0 - confidence
    z = stats.norm.ppf(1.0 - alpha) if one_sided else stats.norm.ppf(1.0 - alpha / 2)
    phat = successes / n
    denom = 1.0 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return centre - half, centre + half


def measure_open_trial_win_rate(results: Iterable[bool], delta: int, k: int, min_samples: int = 100) -> tuple[float, float]:
    """Empirical win fraction over open trials and the analytic lower bound."""
    arr = np.fromiter((bool(r) for r in results), dtype=bool)
    if arr.size < min_samples:
        raise InsufficientSamples(f"{arr.size} trials < {min_samples}")
    return float(arr.mean()), open_trial_bound(delta, k)


def symmetric_contest(trials: int, k: int = protocol.DEFAULT_K, seed: int = 0) -> list[bool]:
    """Two initiators competing for one shared participant, run on the protocol itself.

    Each trial starts both initiators with CheckStart (each draws from its
    own node stream), delivers both requests to the participant and runs its
    CheckPriorities.  Returns, per trial, whether the first initiator got
    ``win<true>``.  The paper's per-node value is 7/16 for K=8.
    """
    rng_u = random.Random(f"{seed}:node:0")
    rng_w = random.Random(f"{seed}:node:2")
    ready = NodeState(state=LockState.PREPARE, L=frozenset({0, 1}), R=frozenset({0, 1}))
    waiting = NodeState(phase=Phase.PREPARE, A=frozenset({1, 2}))
    out = []
    for _ in range(trials):
        _, eu = protocol.execute(ready, ActionId.CHECK_START, rng=rng_u, k=k)
        _, ew = protocol.execute(ready, ActionId.CHECK_START, rng=rng_w, k=k)
        # port 1 of each initiator leads to the participant; it sees them on ports 1 and 2
        v = waiting
        for port, eff in ((1, eu), (2, ew)):
            msg = dict(eff.sends)[1]
            v, _ = protocol.execute(v, ActionId.RECEIVE_REQUEST, incoming=(port, msg))
        _, ev = protocol.execute(v, ActionId.CHECK_PRIORITIES)
        out.append(dict(ev.sends)[1].outcome)
    return out


# -- the monitor ---------------------------------------------------------------------


@dataclass
class _Trial:
    start: int
    open: bool = True


@dataclass
class Monitor:
    """Runs every checker each round and tracks lock requests and trials.

    ``slow_after`` is the per-request latency, in rounds, past which a request
    is counted as SLOW (a warning, not a failure).
    """

    slow_after: Optional[int] = None
    check_dag: bool = True
    violations: list = field(default_factory=list)
    records: list = field(default_factory=list)
    open_trials: list = field(default_factory=list)  # won? per open trial
    closed_trials: int = 0
    contests: list = field(default_factory=list)  # (round, node, P, winner label)
    rounds: int = 0
    max_channel: int = 0
    max_message_age: int = 0

    def __post_init__(self):
        self._active: dict[int, LockRequestRecord] = {}
        self._trial: dict[int, _Trial] = {}
        self._pending_success: list[LockRequestRecord] = []
        self._done_this_round: list[LockRequestRecord] = []

    # observer protocol
    def on_execution(self, sim, ex) -> None:
        u = ex.node
        a = ex.action
        if ex.item is not None:
            age = ex.start - ex.item.sent_round
            if age > self.max_message_age:
                self.max_message_age = age
        if a is ActionId.INIT_LOCK and ex.after.state is LockState.PREPARE and ex.before.state is None:
            nbrs = frozenset(b.peer_of(u) for b in sim.topology.ports[u].values())
            rec = LockRequestRecord(u, ex.start, nbrs)
            self.records.append(rec)
            self._active[u] = rec
            self._pending_success.append(rec)
        elif a is ActionId.CHECK_START:
            self._begin_trial(sim, u, ex.start)
        elif a is ActionId.CHECK_WIN:
            trial = self._trial.pop(u, None)
            won = ex.after.state is LockState.WIN
            if trial is not None:
                self.closed_trials += 1
                if trial.open:
                    self.open_trials.append(won)
            if not won:
                self._begin_trial(sim, u, ex.start)
        elif a is ActionId.CHECK_PRIORITIES:
            winner = next((p for p, m in ex.effects.sends if m.outcome), None)
            self.contests.append((ex.start, u, ex.before.lock, tuple(sorted(ex.before.P)), winner))
        elif a is ActionId.CHECK_DONE:
            rec = self._active.pop(u, None)
            if rec is None:
                self.violations.append(Violation("success", ex.start, f"CheckDone at {u} without a request"))
                return
            rec.done_round = ex.start
            problem = check_done(rec, sim, ex.effects.api_result.ports)
            if problem is not None:
                rec.anomaly = problem
                self.violations.append(Violation("success", ex.start, problem))
            else:
                self._done_this_round.append(rec)

    def _begin_trial(self, sim, u: int, rnd: int) -> None:
        rec = self._active.get(u)
        if rec is not None:
            rec.trials += 1
        self._trial[u] = _Trial(rnd)

    def on_round(self, sim) -> None:
        self.rounds = sim.round
        sets = lock_sets(sim)
        self.violations.extend(check_mutual_exclusion(sets, sim.round))
        self.violations.extend(check_held_locks(sim))
        for ch in sim.topology.channels.values():
            n = len(ch)
            if n > self.max_channel:
                self.max_channel = n
        self.violations.extend(check_channel_bound(sim))
        if self.check_dag:
            self.violations.extend(check_dependency_dag(sim))
        if self._pending_success:
            still = []
            for rec in self._pending_success:
                verdict, _ = check_success(rec, sim, sets)
                if verdict == PENDING:
                    still.append(rec)
            self._pending_success = still
        done = self._done_this_round
        if done:
            for rec in done:
                if rec.success_round is None:
                    rec.anomaly = f"node {rec.node} finished CheckDone at {rec.done_round} before its lock set matched"
                    self.violations.append(Violation("success", sim.round, rec.anomaly))
            done.clear()
        if self._trial:
            states = sim.states
            topo = sim.topology
            for u, trial in self._trial.items():
                if not trial.open:
                    continue
                pending = topo.detectors[u].pending
                for l in states[u].L:
                    if l == 0:
                        w = u
                    elif l in pending:
                        continue
                    else:
                        w = topo.peer(u, l)
                        if w is None:
                            continue
                    if states[w].lock is not None:
                        trial.open = False
                        break

    # summaries
    def lockout(self, horizon_round: int) -> dict:
        succeeded = [r for r in self.records if r.success_round is not None]
        failed = [r for r in self.records if r.success_round is None]
        slow = [r for r in succeeded if self.slow_after is not None and r.latency > self.slow_after]
        return {
            "issued": len(self.records),
            "succeeded": len(succeeded),
            "failed": len(failed),
            "slow": len(slow),
            "max_latency": max((r.latency for r in succeeded), default=0),
        }

    def violation_counts(self) -> dict:
        counts = {"mutual_exclusion": 0, "held_lock": 0, "channel_bound": 0, "dag_cycle": 0, "success": 0}
        for v in self.violations:
            counts[v.kind] = counts.get(v.kind, 0) + 1
        return counts


def slow_threshold(fairness_bound: int, delta: int) -> int:
    """Per-request latency after which a request counts as SLOW."""
    return 10 * fairness_bound * (delta * delta + 1)
