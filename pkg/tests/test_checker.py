import itertools
import math
from fractions import Fraction

import pytest

from localmutex.apps import RepeatedLocking
from localmutex.checker import (
    InsufficientSamples,
    LockRequestRecord,
    Monitor,
    check_channel_bound,
    check_dependency_dag,
    check_held_locks,
    check_mutual_exclusion,
    dependency_graph,
    find_cycle,
    lock_sets,
    measure_open_trial_win_rate,
    open_trial_bound,
    persistent_set,
    slow_threshold,
    symmetric_contest,
    wilson_interval,
)
from localmutex.protocol import PREPARE, READY, SET_LOCK, LockState, NodeState, Phase, request_lock, WIN_TRUE
from localmutex.scheduler import ScheduleConfig, Simulation
from localmutex.tvg import Scenario


def static_sim(n, delta, edges, **cfg):
    return Simulation(Scenario(n, delta, edges), ScheduleConfig(**cfg))


# -- mutual exclusion --------------------------------------------------------------------


def test_all_unlocked_is_ok():
    sim = static_sim(4, 2, [(0, 1), (1, 2)])
    sets = lock_sets(sim)
    assert all(v == set() for v in sets.values())
    assert check_mutual_exclusion(sets) == []


def test_disjoint_lock_sets_ok():
    assert check_mutual_exclusion({0: {0, 1, 2}, 3: {3, 4}}) == []


def test_overlapping_lock_sets_flagged():
    (v,) = check_mutual_exclusion({0: {0, 1}, 2: {1, 2}}, rnd=7)
    assert v.kind == "mutual_exclusion" and v.round == 7 and "node 1" in v.detail


def test_lock_sets_follow_lock_variables():
    sim = static_sim(3, 2, [(0, 1), (1, 2)])
    sim.states[0] = NodeState(state=LockState.LOCKED, lock=0, L=frozenset({0, 1}))
    sim.states[1] = NodeState(lock=sim.topology.port_to(1, 0))
    assert lock_sets(sim) == {0: {0, 1}, 1: set(), 2: set()}


def test_injected_double_holder_is_flagged():
    # nodes 0 and 2 both claim node 1, which can only point at one of them
    sim = static_sim(3, 2, [(0, 1), (1, 2)])
    for u in (0, 2):
        sim.states[u] = NodeState(state=LockState.LOCKED, lock=0, L=frozenset({0, 1}))
    sim.states[1] = NodeState(lock=sim.topology.port_to(1, 0))
    (v,) = check_held_locks(sim)
    assert v.kind == "held_lock" and "node 2" in v.detail


def test_lock_over_rebound_port_is_not_counted():
    sim = static_sim(3, 1, [(0, 1)])
    sim.states[1] = NodeState(lock=1)
    sim.topology.round = 1
    sim.topology.disconnect(0, 1)
    sim.topology.connect(1, 2)  # port 1 of node 1 now leads to 2
    assert sim.topology.port_to(1, 2) == 1
    assert lock_sets(sim)[2] == set()


# -- channel bound ------------------------------------------------------------------------


def test_empty_channels_ok():
    assert check_channel_bound(static_sim(2, 1, [(0, 1)])) == []


def test_dual_prepare_fills_channel_to_two():
    sim = static_sim(2, 1, [(0, 1)], activation="all")
    sim.call(0, "lock")
    sim.call(1, "lock")
    sim.step()
    assert len(sim.topology.channel(0, 1)) == 2
    assert check_channel_bound(sim) == []


def test_three_messages_flagged():
    sim = static_sim(2, 1, [(0, 1)])
    topo = sim.topology
    for u, msg in ((0, PREPARE), (1, PREPARE)):
        topo.take_detector_snapshot(u)
        topo.send(u, 1, msg)
    topo.take_detector_snapshot(0)
    topo.send(0, 1, READY)
    (v,) = check_channel_bound(sim)
    assert v.kind == "channel_bound"


# -- dependency graph -------------------------------------------------------------------------


def test_no_competitors_empty_graph():
    sim = static_sim(3, 2, [(0, 1)])
    assert dependency_graph(sim) == {}
    assert check_dependency_dag(sim) == []


def test_single_initiator_star_is_acyclic():
    # node 0 competes for {0, 1, 2}; node 1 holds its request, node 2 already answered
    sim = static_sim(3, 2, [(0, 1), (0, 2)])
    p1, p2 = sim.topology.port_to(1, 0), sim.topology.port_to(2, 0)
    sim.states[0] = NodeState(
        state=LockState.COMPETE, phase=Phase.COMPETE, L=frozenset({0, 1, 2}),
        C=frozenset({0}), P=frozenset({(0, 3)}), W=frozenset({(2, True)}),
    )
    sim.states[1] = NodeState(phase=Phase.COMPETE, C=frozenset({p1}), P=frozenset({(p1, 3)}))
    sim.states[2] = NodeState(phase=Phase.COMPETE, C=frozenset({p2}))
    g = dependency_graph(sim)
    assert g[("P", 0)] == {("I", 0)} and g[("P", 1)] == {("I", 0)}
    assert g[("I", 0)] == {("P", 2)}
    assert find_cycle(g) is None


def test_find_cycle_on_hand_built_graph():
    g = {("I", 0): {("P", 1)}, ("P", 1): {("I", 2)}, ("I", 2): {("P", 3)}, ("P", 3): {("I", 0)}}
    cyc = find_cycle(g)
    assert cyc is not None and set(cyc) >= {("I", 0), ("P", 1)}
    del g[("P", 3)]
    assert find_cycle(g) is None


def test_in_flight_reading_sees_requests_in_transit():
    sim = static_sim(2, 1, [(0, 1)])
    sim.states[0] = NodeState(state=LockState.COMPETE, L=frozenset({0, 1}))
    sim.topology.take_detector_snapshot(0)
    sim.topology.send(0, 1, request_lock(2))
    assert dependency_graph(sim)[("I", 0)] == set()
    assert dependency_graph(sim, in_flight=True)[("P", 1)] == {("I", 0)}


def stuck_pair(strict):
    cfg = ScheduleConfig(seed=7, horizon=800, strict_pseudocode=strict)
    sim = Simulation(Scenario(2, 2, [(0, 1)]), cfg)
    mon = Monitor(slow_after=slow_threshold(16, 2))
    sim.observers.append(mon)
    RepeatedLocking(cutoff=400).attach(sim)
    sim.run()
    return sim, mon


def test_literal_pseudocode_deadlocks_with_persistent_cycle():
    sim, mon = stuck_pair(strict=True)
    assert [s.state for s in sim.states] == [LockState.COMPETE, LockState.COMPETE]
    assert check_dependency_dag(sim) != []
    assert mon.lockout(sim.round)["failed"] == 2


def test_amended_protocol_same_seed_completes():
    sim, mon = stuck_pair(strict=False)
    assert mon.violations == []
    lo = mon.lockout(sim.round)
    assert lo["failed"] == 0 and lo["issued"] >= 5


# -- success ------------------------------------------------------------------------------------


def locked_center(events, leaves=5, extra=0, seed=0):
    n = 1 + leaves + extra
    sc = Scenario(n, leaves + extra, [(0, v) for v in range(1, leaves + 1)], events)
    sim = Simulation(sc, ScheduleConfig(activation="all", seed=seed))
    mon = Monitor()
    sim.observers.append(mon)
    sim.call(0, "lock")
    while sim.states[0].state is not LockState.LOCKED:
        sim.step()
    sim.step()
    (rec,) = mon.records
    return sim, mon, rec


def test_isolated_node_success_set_is_itself():
    sim = Simulation(Scenario(1, 1), ScheduleConfig(activation="all"))
    mon = Monitor()
    sim.observers.append(mon)
    sim.call(0, "lock")
    while sim.states[0].state is not LockState.LOCKED:
        sim.step()
    sim.step()
    (rec,) = mon.records
    assert rec.success_round is not None and lock_sets(sim)[0] == {0}


def test_departed_neighbor_excluded_from_success_set():
    sim, mon, rec = locked_center([(3, "disconnect", 0, 4)])
    assert rec.neighbors_at_issue == {1, 2, 3, 4, 5}
    assert rec.success_round > 3 and rec.anomaly is None and mon.violations == []
    assert lock_sets(sim)[0] == {0, 1, 2, 3, 5}
    assert persistent_set(sim, rec, rec.success_round) == {0, 1, 2, 3, 5}


def test_late_neighbor_not_required():
    sim, mon, rec = locked_center([(2, "connect", 0, 6)], extra=1)
    assert 6 not in rec.neighbors_at_issue
    assert sim.topology.present_throughout(0, 6, 2, sim.round)
    assert rec.anomaly is None and mon.violations == []
    assert lock_sets(sim)[0] == {0, 1, 2, 3, 4, 5}


def test_persistent_set_reads_presence_history():
    sim = static_sim(3, 2, [(0, 1), (0, 2)])
    rec = LockRequestRecord(0, 1, frozenset({1, 2}))
    sim.topology.round = 4
    sim.topology.disconnect(0, 2)
    sim.topology.round = 5
    sim.topology.connect(0, 2)
    assert persistent_set(sim, rec, 3) == {0, 1, 2}
    assert persistent_set(sim, rec, 6) == {0, 1}


def test_check_done_mismatch_is_anomaly():
    sim = static_sim(3, 2, [(0, 1), (0, 2)], activation="all")
    mon = Monitor()
    sim.observers.append(mon)
    sim.call(0, "lock")
    sim.step()
    (rec,) = mon.records
    from localmutex.checker import check_done

    assert check_done(rec, sim, [0, 1, 2]) is None
    assert "missing [2]" in check_done(rec, sim, [0, 1])


# -- open-trial statistics ---------------------------------------------------------------------


def test_open_trial_bound_closed_form():
    assert open_trial_bound(2, 8) == pytest.approx((7 / 8) ** 8 / 8)
    assert open_trial_bound(2, 8) == pytest.approx(0.04295, abs=5e-6)
    assert open_trial_bound(1, 2) == pytest.approx(0.25 / 2)


def test_two_competitor_oracle_is_seven_sixteenths():
    pairs = list(itertools.product(range(8), repeat=2))
    assert len(pairs) == 64
    wins = sum(1 for a, b in pairs if a > b)
    assert Fraction(wins, 64) == Fraction(7, 16)


def test_symmetric_contest_matches_oracle():
    res = symmetric_contest(4000, k=8, seed=3)
    lo, hi = wilson_interval(sum(res), len(res), 0.99)
    assert lo <= 7 / 16 <= hi


def test_symmetric_contest_k1_always_ties():
    assert not any(symmetric_contest(50, k=1))


def test_wilson_interval_reference_values():
    lo, hi = wilson_interval(50, 100, 0.95)
    assert (round(lo, 4), round(hi, 4)) == (0.4038, 0.5962)
    lo1, _ = wilson_interval(50, 100, 0.95, one_sided=True)
    assert lo < lo1 < 0.5
    with pytest.raises(InsufficientSamples):
        wilson_interval(0, 0)


def test_solo_initiator_wins_every_open_trial():
    sim = Simulation(Scenario(1, 1), ScheduleConfig(horizon=4000))
    mon = Monitor()
    sim.observers.append(mon)
    RepeatedLocking().attach(sim)
    sim.run()
    rate, bound = measure_open_trial_win_rate(mon.open_trials, 1, 8)
    assert rate == 1.0 >= bound


def test_measure_requires_minimum_samples():
    with pytest.raises(InsufficientSamples):
        measure_open_trial_win_rate([True] * 5, 2, 8, min_samples=10)


def test_slow_threshold():
    assert slow_threshold(16, 4) == 10 * 16 * 17
