import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from localmutex.protocol import (
    ACK_LOCK,
    ACK_UNLOCK,
    PREPARE,
    READY,
    RELEASE_LOCK,
    SET_LOCK,
    WIN_FALSE,
    WIN_TRUE,
    ActionId,
    DuplicateSendOnPort,
    Effects,
    LockState,
    LockSucceeded,
    Message,
    MsgKind,
    NodeState,
    NotEnabled,
    Phase,
    RequestRejected,
    UnlockSucceeded,
    clean_up,
    decode_message,
    decode_state,
    draw_priority,
    enabled_actions,
    encode_message,
    encode_state,
    execute,
    message_bits,
    parse_result,
    request_lock,
    result_code,
    state_bits,
)

A = ActionId


def item(port, msg):
    return (port, msg)


def sends(eff):
    return sorted(eff.sends)


# -- independent CleanUp oracle ----------------------------------------------------------
# A literal, line-by-line reading of the helper over plain dicts and lists.


def cleanup_oracle(state: dict, D):
    s = {k: (set(v) if isinstance(v, (set, frozenset)) else v) for k, v in state.items()}
    out = []
    for l in D:
        if s["lock"] == l:
            s["lock"] = None
        s["L"].discard(l)
        s["R"].discard(l)
        s["W"] = {(x, b) for (x, b) in s["W"] if x != l}
        s["H"].discard(l)
        s["A"].discard(l)
        s["C"].discard(l)
        s["P"] = {(x, p) for (x, p) in s["P"] if x != l}
    if len(s["C"]) == 0:
        for l in s["H"]:
            out.append((l, "ready"))
        s["A"] = s["A"] | s["H"]
        s["H"] = set()
        if s["A"]:
            s["phase"] = "PREPARE"
        else:
            s["phase"] = None
    return s, sorted(out)


def as_plain(s: NodeState) -> dict:
    return {
        "lock": s.lock,
        "phase": None if s.phase is None else s.phase.name,
        "L": set(s.L),
        "R": set(s.R),
        "W": set(s.W),
        "H": set(s.H),
        "A": set(s.A),
        "C": set(s.C),
        "P": set(s.P),
    }


label_sets = st.frozensets(st.integers(0, 4), max_size=5)


@st.composite
def node_states(draw):
    W = {l: draw(st.booleans()) for l in draw(label_sets)}
    P = {l: draw(st.integers(0, 7)) for l in draw(label_sets)}
    return NodeState(
        lock=draw(st.one_of(st.none(), st.integers(0, 4))),
        state=draw(st.one_of(st.none(), st.sampled_from(list(LockState)))),
        phase=draw(st.one_of(st.none(), st.sampled_from(list(Phase)))),
        L=draw(label_sets),
        R=draw(label_sets),
        W=frozenset(W.items()),
        H=draw(label_sets),
        A=draw(label_sets),
        C=draw(label_sets),
        P=frozenset(P.items()),
    )


@settings(max_examples=300)
@given(s=node_states(), snap=st.frozensets(st.integers(1, 4), max_size=4))
def test_clean_up_matches_line_by_line_oracle(s, snap):
    want, want_sends = cleanup_oracle(as_plain(s), sorted(snap))
    got = s.copy()
    eff = Effects()
    clean_up(got, sorted(snap), eff)
    assert as_plain(got) == want
    assert sorted((p, m.kind.name.lower()) for p, m in eff.sends) == want_sends
    assert eff.helper_sends == len(eff.sends)


def test_clean_up_example_releases_held_initiator():
    s = NodeState(lock=3, phase=Phase.COMPETE, C=frozenset({3}), H=frozenset({1}))
    eff = Effects()
    clean_up(s, [3], eff)
    assert s.lock is None and s.C == frozenset()
    assert eff.sends == [(1, READY)]
    assert s.A == {1} and s.H == frozenset() and s.phase is Phase.PREPARE
    want, _ = cleanup_oracle(as_plain(NodeState(lock=3, phase=Phase.COMPETE, C=frozenset({3}), H=frozenset({1}))), [3])
    assert want == as_plain(s)


def test_clean_up_never_removes_self_label():
    s = NodeState(state=LockState.PREPARE, L=frozenset({0, 1}))
    clean_up(s, [1], Effects())
    assert s.L == {0}


# -- enabled_actions -----------------------------------------------------------------------


def test_fresh_node_has_nothing_enabled():
    en = enabled_actions(NodeState())
    assert en.actions == [] and en.pre_enabled == frozenset()


def test_check_start_enabled_when_all_ready():
    s = NodeState(state=LockState.PREPARE, L=frozenset({0, 2, 3}), R=frozenset({0, 2, 3}))
    assert (A.CHECK_START, None) in enabled_actions(s).actions


def test_check_win_pre_enabled_after_disconnect():
    s = NodeState(
        state=LockState.COMPETE,
        L=frozenset({0, 1, 2}),
        W=frozenset({(0, True), (2, True)}),
    )
    # port 2 just disconnected: |W| = |L| - 1 now but becomes |W|=|L| after CleanUp
    s2 = NodeState(state=LockState.COMPETE, L=frozenset({0, 1, 2}), W=frozenset({(0, True), (1, True)}))
    assert (A.CHECK_WIN, None) not in enabled_actions(s2).actions
    en = enabled_actions(s2, snapshot={2})
    assert A.CHECK_WIN in en.pre_enabled
    cleaned = s2.copy()
    clean_up(cleaned, [2], Effects())
    assert len(cleaned.W) == len(cleaned.L)
    assert A.CHECK_WIN not in enabled_actions(s).pre_enabled


def test_receive_actions_enabled_per_message():
    msgs = [item(1, PREPARE), item(2, request_lock(3)), item(0, READY)]
    en = enabled_actions(NodeState(), msgs, lock_api_called=True)
    kinds = [a for a, _ in en.actions]
    assert kinds == [A.INIT_LOCK, A.RECEIVE_PREPARE, A.RECEIVE_REQUEST, A.RECEIVE_READY]


def test_cleanup_action_guard():
    assert (A.CLEAN_UP, None) in enabled_actions(NodeState(phase=Phase.PREPARE)).actions
    assert (A.CLEAN_UP, None) in enabled_actions(NodeState(state=LockState.UNLOCK)).actions
    assert (A.CLEAN_UP, None) not in enabled_actions(NodeState(state=LockState.LOCKED)).actions


# -- execute: spec examples -------------------------------------------------------------------


def test_init_lock_sends_prepare_to_closed_neighborhood():
    t, eff = execute(NodeState(), A.INIT_LOCK, ports=[1, 3])
    assert t.state is LockState.PREPARE and t.L == {0, 1, 3}
    assert sends(eff) == [(0, PREPARE), (1, PREPARE), (3, PREPARE)]


def test_init_lock_rejected_unless_idle():
    s = NodeState(state=LockState.LOCKED, lock=0, L=frozenset({0}))
    t, eff = execute(s, A.INIT_LOCK, ports=[1])
    assert isinstance(eff.api_result, RequestRejected)
    assert t == s


def test_init_lock_with_targets_locks_only_the_pair():
    t, eff = execute(NodeState(), A.INIT_LOCK, ports=[1, 2, 3], targets=[2])
    assert t.L == {0, 2}
    assert sends(eff) == [(0, PREPARE), (2, PREPARE)]


def test_receive_prepare_while_competing_puts_on_hold():
    s = NodeState(phase=Phase.COMPETE, C=frozenset({1}))
    t, eff = execute(s, A.RECEIVE_PREPARE, incoming=item(2, PREPARE))
    assert t.H == {2} and eff.sends == []


def test_receive_prepare_otherwise_adds_applicant_and_replies():
    t, eff = execute(NodeState(), A.RECEIVE_PREPARE, incoming=item(2, PREPARE))
    assert t.A == {2} and t.phase is Phase.PREPARE
    assert eff.sends == [(2, READY)]


def test_receive_prepare_in_unlock_state_takes_applicant_branch():
    s = NodeState(state=LockState.UNLOCK, L=frozenset({0}))
    t, eff = execute(s, A.RECEIVE_PREPARE, incoming=item(1, PREPARE))
    assert t.A == {1} and eff.sends == [(1, READY)]


def test_check_priorities_tie_sends_false_to_all():
    s = NodeState(phase=Phase.COMPETE, C=frozenset({1, 2}), P=frozenset({(1, 5), (2, 5)}))
    t, eff = execute(s, A.CHECK_PRIORITIES)
    assert sends(eff) == [(1, WIN_FALSE), (2, WIN_FALSE)]
    assert t.P == frozenset()


def test_check_priorities_already_locked_sends_false():
    s = NodeState(lock=4, phase=Phase.COMPETE, C=frozenset({1}), P=frozenset({(1, 7)}))
    _, eff = execute(s, A.CHECK_PRIORITIES)
    assert eff.sends == [(1, WIN_FALSE)]


def test_check_priorities_unique_highest_wins():
    s = NodeState(phase=Phase.COMPETE, C=frozenset({0, 1, 2}), P=frozenset({(0, 1), (1, 6), (2, 3)}))
    _, eff = execute(s, A.CHECK_PRIORITIES)
    assert sends(eff) == [(0, WIN_FALSE), (1, WIN_TRUE), (2, WIN_FALSE)]


def test_check_priorities_not_enabled_until_all_priorities():
    s = NodeState(phase=Phase.COMPETE, C=frozenset({1, 2}), P=frozenset({(1, 5)}))
    with pytest.raises(NotEnabled):
        execute(s, A.CHECK_PRIORITIES)


def test_check_start_draws_priority_and_requests_everyone():
    s = NodeState(state=LockState.PREPARE, L=frozenset({0, 2}), R=frozenset({0, 2}))
    t, eff = execute(s, A.CHECK_START, rng=random.Random(1), k=8)
    p = random.Random(1).randrange(8)
    assert t.state is LockState.COMPETE and t.R == frozenset()
    assert sends(eff) == [(0, request_lock(p)), (2, request_lock(p))]


def test_receive_request_promotes_applicant():
    s = NodeState(phase=Phase.PREPARE, A=frozenset({1}))
    t, eff = execute(s, A.RECEIVE_REQUEST, incoming=item(1, request_lock(4)))
    assert t.A == frozenset() and t.C == {1} and t.P == {(1, 4)}
    assert t.phase is Phase.COMPETE and eff.sends == []


def test_late_applicant_answered_immediately():
    # candidate 0 was answered and has not asked again; applicant 1 arrives late
    s = NodeState(phase=Phase.COMPETE, C=frozenset({0}), A=frozenset({1}))
    t, eff = execute(s, A.RECEIVE_REQUEST, incoming=item(1, request_lock(4)))
    assert t.C == {0, 1} and t.P == frozenset()
    assert eff.sends == [(1, WIN_FALSE)]


def test_late_applicant_strict_pseudocode_waits():
    s = NodeState(phase=Phase.COMPETE, C=frozenset({0}), A=frozenset({1}))
    t, eff = execute(s, A.RECEIVE_REQUEST, incoming=item(1, request_lock(4)), strict=True)
    assert t.C == {0, 1} and t.P == {(1, 4)} and eff.sends == []


def test_check_win_loss_redraws_and_retries():
    s = NodeState(state=LockState.COMPETE, L=frozenset({0, 1}), W=frozenset({(0, True), (1, False)}))
    t, eff = execute(s, A.CHECK_WIN, rng=random.Random(3))
    assert t.state is LockState.COMPETE and t.W == frozenset()
    assert {p for p, _ in eff.sends} == {0, 1}
    assert all(m.kind is MsgKind.REQUEST_LOCK for _, m in eff.sends)


def test_check_win_success_sends_set_lock():
    s = NodeState(state=LockState.COMPETE, L=frozenset({0, 1}), R=frozenset({0}), W=frozenset({(0, True), (1, True)}))
    t, eff = execute(s, A.CHECK_WIN)
    assert t.state is LockState.WIN and t.R == frozenset() and t.W == frozenset()
    assert sends(eff) == [(0, SET_LOCK), (1, SET_LOCK)]


def test_receive_set_lock_sets_lock_before_cleanup():
    s = NodeState(phase=Phase.COMPETE, C=frozenset({2}), H=frozenset({1}))
    t, eff = execute(s, A.RECEIVE_SET_LOCK, incoming=item(2, SET_LOCK))
    assert t.lock == 2 and t.C == frozenset()
    # C emptied by the lock itself, so CleanUp released the held node
    assert t.A == {1} and t.phase is Phase.PREPARE
    assert eff.sends == [(1, READY), (2, ACK_LOCK)]


def test_receive_set_lock_on_just_severed_port_clears_lock():
    s = NodeState(phase=Phase.COMPETE, C=frozenset({2}))
    t, eff = execute(s, A.RECEIVE_SET_LOCK, snapshot={2}, incoming=item(2, SET_LOCK))
    assert t.lock is None


def test_check_done_returns_lock_set():
    s = NodeState(state=LockState.WIN, lock=0, L=frozenset({0, 1}), R=frozenset({0, 1}))
    t, eff = execute(s, A.CHECK_DONE)
    assert t.state is LockState.LOCKED and t.R == frozenset()
    assert eff.api_result == LockSucceeded(frozenset({0, 1}))


def test_unlock_path():
    s = NodeState(state=LockState.LOCKED, lock=0, L=frozenset({0, 1}))
    t, eff = execute(s, A.INIT_UNLOCK)
    assert t.state is LockState.UNLOCK and sends(eff) == [(0, RELEASE_LOCK), (1, RELEASE_LOCK)]
    t2, eff2 = execute(NodeState(lock=3), A.RECEIVE_RELEASE, incoming=item(3, RELEASE_LOCK))
    assert t2.lock is None and eff2.sends == [(3, ACK_UNLOCK)]
    t3, _ = execute(t, A.RECEIVE_ACK_UNLOCK, incoming=item(1, ACK_UNLOCK))
    assert t3.R == {1}
    done, eff3 = execute(NodeState(state=LockState.UNLOCK, L=frozenset({0, 1}), R=frozenset({0, 1})), A.CHECK_UNLOCKED)
    assert done.state is None and isinstance(eff3.api_result, UnlockSucceeded)


def test_init_unlock_rejected_unless_locked():
    _, eff = execute(NodeState(), A.INIT_UNLOCK)
    assert isinstance(eff.api_result, RequestRejected)


def test_rejected_init_lock_still_processes_detector():
    s = NodeState(state=LockState.COMPETE, L=frozenset({0, 1, 2}))
    t, eff = execute(s, A.INIT_LOCK, snapshot={2}, ports=[1])
    assert isinstance(eff.api_result, RequestRejected)
    assert t.L == {0, 1}


def test_cleanup_ready_and_action_send_share_a_port():
    # CleanUp releases held initiator 1; InitLock also prepares port 1
    s = NodeState(phase=Phase.COMPETE, C=frozenset({2}), H=frozenset({1}))
    t, eff = execute(s, A.INIT_LOCK, snapshot={2}, ports=[1])
    assert eff.sends == [(1, READY), (0, PREPARE), (1, PREPARE)]
    assert eff.helper_sends == 1


def test_effects_rejects_two_body_sends_on_one_port():
    eff = Effects()
    eff.send(2, PREPARE)
    with pytest.raises(DuplicateSendOnPort):
        eff.send(2, READY)


def test_receive_needs_matching_message():
    with pytest.raises(NotEnabled):
        execute(NodeState(), A.RECEIVE_READY, incoming=item(1, PREPARE))
    with pytest.raises(NotEnabled):
        execute(NodeState(), A.RECEIVE_READY)


def test_isolated_node_happy_path():
    rng = random.Random(0)
    s, eff = execute(NodeState(), A.INIT_LOCK, ports=[])
    inbox = list(eff.sends)
    steps = 0
    while s.state is not LockState.LOCKED:
        steps += 1
        assert steps < 20
        en = enabled_actions(s, [m for m in inbox])
        check = [a for a, it in en.actions if it is None and a is not A.CLEAN_UP]
        if check:
            s, eff = execute(s, check[0], rng=rng)
        else:
            msg = inbox.pop(0)
            from localmutex.protocol import RECEIVE_ACTION

            s, eff = execute(s, RECEIVE_ACTION[msg[1].kind], incoming=msg, rng=rng)
        inbox.extend(eff.sends)
    assert s.lock == 0 and eff.api_result == LockSucceeded(frozenset({0}))


# -- priorities --------------------------------------------------------------------------------


def test_draw_priority_k1_always_zero():
    rng = random.Random(5)
    assert {draw_priority(rng, 1) for _ in range(100)} == {0}


def test_draw_priority_uniform_chi_square():
    rng = random.Random(2024)
    n = 10**6
    counts = [0] * 8
    for _ in range(n):
        counts[draw_priority(rng, 8)] += 1
    sigma = math.sqrt(n * (1 / 8) * (7 / 8))
    assert all(abs(c - n / 8) <= 3 * sigma for c in counts)
    assert stats.chisquare(counts).pvalue > 0.001


def test_draw_priority_deterministic():
    a, b = random.Random("7:node:3"), random.Random("7:node:3")
    assert [draw_priority(a) for _ in range(50)] == [draw_priority(b) for _ in range(50)]


# -- encodings -------------------------------------------------------------------------------------


ALL_MESSAGES = [PREPARE, READY, SET_LOCK, ACK_LOCK, RELEASE_LOCK, ACK_UNLOCK, WIN_TRUE, WIN_FALSE] + [
    request_lock(p) for p in range(8)
]


def test_message_wire_format_roundtrip_and_width():
    codes = {encode_message(m, 8) for m in ALL_MESSAGES}
    assert len(codes) == len(ALL_MESSAGES)
    assert max(codes) < 2 ** message_bits(8)
    assert message_bits(8) == 3 + 1 + 3
    for m in ALL_MESSAGES:
        assert decode_message(encode_message(m, 8), 8) == m


def test_message_layout_is_kind_outcome_priority():
    assert encode_message(request_lock(5), 8) == (2 << 4) | 5
    assert encode_message(WIN_TRUE, 8) == (3 << 4) | (1 << 3)


@pytest.mark.parametrize("k", [1, 2, 8, 9, 16])
def test_message_width_independent_of_delta(k):
    # the encoder takes no delta at all; width depends on k only
    assert message_bits(k) == 4 + max(0, math.ceil(math.log2(k)))


@settings(max_examples=200)
@given(s=node_states())
def test_state_encoding_roundtrip(s):
    data = encode_state(s, 4)
    assert len(data) * 8 >= state_bits(4)
    assert decode_state(data, 4) == s


def test_result_codes_roundtrip():
    for r in (None, LockSucceeded(frozenset({0, 2})), UnlockSucceeded(), RequestRejected()):
        assert parse_result(result_code(r)) == r


# -- transition properties ---------------------------------------------------------------------------


LEGAL_STATE_STEPS = {
    (None, LockState.PREPARE),
    (LockState.PREPARE, LockState.COMPETE),
    (LockState.COMPETE, LockState.COMPETE),
    (LockState.COMPETE, LockState.WIN),
    (LockState.WIN, LockState.LOCKED),
    (LockState.LOCKED, LockState.UNLOCK),
    (LockState.UNLOCK, None),
}

messages = st.sampled_from(ALL_MESSAGES)


@settings(max_examples=400)
@given(
    s=node_states(),
    snap=st.frozensets(st.integers(1, 4), max_size=3),
    msg=messages,
    port=st.integers(0, 4),
    seed=st.integers(0, 1000),
    lock_call=st.booleans(),
    unlock_call=st.booleans(),
)
def test_enabled_actions_execute_legally_and_purely(s, snap, msg, port, seed, lock_call, unlock_call):
    en = enabled_actions(s, [item(port, msg)], lock_call, unlock_call, snap)
    for action, it in en.actions:
        t1, e1 = execute(s, action, snap, it, random.Random(seed), ports=[1, 2, 3, 4])
        t2, e2 = execute(s, action, snap, it, random.Random(seed), ports=[1, 2, 3, 4])
        assert (t1, e1) == (t2, e2)
        if t1.state != s.state:
            assert (s.state, t1.state) in LEGAL_STATE_STEPS
        body = [p for p, _ in e1.sends[e1.helper_sends:]]
        helper = [p for p, _ in e1.sends[: e1.helper_sends]]
        assert len(body) == len(set(body)) and len(helper) == len(set(helper))
        # a second request on a port whose priority is still held is unreachable
        if port not in {l for l, _ in s.P} and port not in {l for l, _ in s.W}:
            assert all(len({l for l, _ in x}) == len(x) for x in (t1.W, t1.P))


@settings(max_examples=200)
@given(s=node_states(), msg=st.just(PREPARE), port=st.integers(1, 4))
def test_prepare_while_competing_never_grows_candidates(s, msg, port):
    if s.phase is not Phase.COMPETE or port in s.A:
        return
    cleaned = s.copy()
    clean_up(cleaned, [], Effects())
    if cleaned.phase is not Phase.COMPETE:
        return
    t, _ = execute(s, A.RECEIVE_PREPARE, incoming=item(port, msg))
    assert t.C == s.C and t.A == s.A


def test_winner_with_departed_neighbor_can_clean_up():
    # own set-lock already processed, so phase is back to bottom
    s = NodeState(state=LockState.WIN, lock=0, L=frozenset({0, 1, 2}), R=frozenset({0, 1}))
    en = enabled_actions(s, snapshot={2})
    assert en.pre_enabled == {A.CHECK_DONE}
    assert (A.CLEAN_UP, None) in en.actions
    t, eff = execute(s, A.CLEAN_UP, snapshot={2})
    assert t.L == {0, 1} and eff.sends == []
    assert (A.CHECK_DONE, None) in enabled_actions(t).actions


def test_winner_with_departed_neighbor_strict_guard_stalls():
    s = NodeState(state=LockState.WIN, lock=0, L=frozenset({0, 1, 2}), R=frozenset({0, 1}))
    en = enabled_actions(s, snapshot={2}, strict=True)
    assert en.actions == [] and en.pre_enabled == {A.CHECK_DONE}
    with pytest.raises(NotEnabled):
        execute(s, A.CLEAN_UP, snapshot={2}, strict=True)


def test_clean_up_action_not_enabled_by_irrelevant_disconnect():
    s = NodeState(state=LockState.LOCKED, lock=0, L=frozenset({0, 1}))
    assert enabled_actions(s, snapshot={3}).actions == []
    with pytest.raises(NotEnabled):
        execute(s, A.CLEAN_UP, snapshot={3})
