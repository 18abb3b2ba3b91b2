"""Per-node state machine for local mutual exclusion.

Each node runs the same set of guarded actions.  ``execute`` is a pure
function: it takes a node's state, the chosen action, the disconnection
detector snapshot taken at the start of the execution and (for ``Receive*``
actions) the single message being consumed, and returns the successor state
together with the messages to send.

Port labels index everything.  Label ``0`` is the node itself; labels
``1..delta`` are its physical ports.  ``None`` plays the role of "bottom" for
``lock``, ``state`` and ``phase``.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

from .tvg import DuplicateSendOnPort

DEFAULT_K = 8


class LockState(enum.IntEnum):
    PREPARE = 1
    COMPETE = 2
    WIN = 3
    LOCKED = 4
    UNLOCK = 5


class Phase(enum.IntEnum):
    PREPARE = 1
    COMPETE = 2


class MsgKind(enum.IntEnum):
    PREPARE = 0
    READY = 1
    REQUEST_LOCK = 2
    WIN = 3
    SET_LOCK = 4
    ACK_LOCK = 5
    RELEASE_LOCK = 6
    ACK_UNLOCK = 7


class Message(NamedTuple):
    kind: MsgKind
    priority: Optional[int] = None
    outcome: Optional[bool] = None

    def __repr__(self):
        if self.kind is MsgKind.REQUEST_LOCK:
            return f"request-lock<{self.priority}>"
        if self.kind is MsgKind.WIN:
            return f"win<{self.outcome}>"
        return self.kind.name.lower().replace("_", "-")


PREPARE = Message(MsgKind.PREPARE)
READY = Message(MsgKind.READY)
SET_LOCK = Message(MsgKind.SET_LOCK)
ACK_LOCK = Message(MsgKind.ACK_LOCK)
RELEASE_LOCK = Message(MsgKind.RELEASE_LOCK)
ACK_UNLOCK = Message(MsgKind.ACK_UNLOCK)
WIN_TRUE = Message(MsgKind.WIN, outcome=True)
WIN_FALSE = Message(MsgKind.WIN, outcome=False)


def request_lock(priority: int) -> Message:
    return Message(MsgKind.REQUEST_LOCK, priority=priority)


class ActionId(str, enum.Enum):
    INIT_LOCK = "InitLock"
    RECEIVE_PREPARE = "ReceivePrepare"
    RECEIVE_READY = "ReceiveReady"
    CHECK_START = "CheckStart"
    CLEAN_UP = "CleanUpAction"
    RECEIVE_REQUEST = "ReceiveRequest"
    CHECK_PRIORITIES = "CheckPriorities"
    RECEIVE_WIN = "ReceiveWin"
    CHECK_WIN = "CheckWin"
    RECEIVE_SET_LOCK = "ReceiveSetLock"
    RECEIVE_ACK_LOCK = "ReceiveAckLock"
    CHECK_DONE = "CheckDone"
    INIT_UNLOCK = "InitUnlock"
    RECEIVE_RELEASE = "ReceiveRelease"
    RECEIVE_ACK_UNLOCK = "ReceiveAckUnlock"
    CHECK_UNLOCKED = "CheckUnlocked"


RECEIVE_ACTION = {
    MsgKind.PREPARE: ActionId.RECEIVE_PREPARE,
    MsgKind.READY: ActionId.RECEIVE_READY,
    MsgKind.REQUEST_LOCK: ActionId.RECEIVE_REQUEST,
    MsgKind.WIN: ActionId.RECEIVE_WIN,
    MsgKind.SET_LOCK: ActionId.RECEIVE_SET_LOCK,
    MsgKind.ACK_LOCK: ActionId.RECEIVE_ACK_LOCK,
    MsgKind.RELEASE_LOCK: ActionId.RECEIVE_RELEASE,
    MsgKind.ACK_UNLOCK: ActionId.RECEIVE_ACK_UNLOCK,
}
RECEIVE_ACTIONS = frozenset(RECEIVE_ACTION.values())
CHECK_ACTIONS = (
    ActionId.CHECK_START,
    ActionId.CHECK_PRIORITIES,
    ActionId.CHECK_WIN,
    ActionId.CHECK_DONE,
    ActionId.CHECK_UNLOCKED,
)


class ProtocolError(Exception):
    pass


class NotEnabled(ProtocolError):
    """Raised when an action is executed while its guard is false."""


@dataclass(frozen=True)
class LockSucceeded:
    ports: frozenset


@dataclass(frozen=True)
class UnlockSucceeded:
    pass


@dataclass(frozen=True)
class RequestRejected:
    pass


@dataclass
class NodeState:
    lock: Optional[int] = None
    state: Optional[LockState] = None
    phase: Optional[Phase] = None
    L: frozenset = frozenset()
    R: frozenset = frozenset()
    W: frozenset = frozenset()  # (label, outcome) pairs
    H: frozenset = frozenset()
    A: frozenset = frozenset()
    C: frozenset = frozenset()
    P: frozenset = frozenset()  # (label, priority) pairs

    def copy(self) -> "NodeState":
        return copy.copy(self)

    def as_dict(self) -> dict:
        return {
            "lock": self.lock,
            "state": None if self.state is None else self.state.name,
            "phase": None if self.phase is None else self.phase.name,
            "L": sorted(self.L),
            "R": sorted(self.R),
            "W": sorted([l, b] for l, b in self.W),
            "H": sorted(self.H),
            "A": sorted(self.A),
            "C": sorted(self.C),
            "P": sorted([l, p] for l, p in self.P),
        }


@dataclass
class Effects:
    """Outputs of one execution.

    The CleanUp helper and the action body each get one send per port, so a
    READY released by CleanUp may share a port with the action's own message.
    ``helper_sends`` counts the leading entries of ``sends`` made by CleanUp.
    """

    sends: list = field(default_factory=list)  # (port, Message)
    api_result: object = None
    helper_sends: int = 0

    def send(self, port: int, message: Message, helper: bool = False) -> None:
        body = self.sends[self.helper_sends:] if not helper else self.sends[: self.helper_sends]
        for p, _ in body:
            if p == port:
                raise DuplicateSendOnPort(f"second send on port {port}")
        if helper:
            if len(self.sends) > self.helper_sends:
                raise ProtocolError("CleanUp must run before the action body sends")
            self.helper_sends += 1
        self.sends.append((port, message))


def draw_priority(rng, k: int = DEFAULT_K) -> int:
    """Uniform priority in ``0..k-1`` drawn from a ``random.Random``-like source."""
    return rng.randrange(k)


def clean_up(s: NodeState, snapshot: Iterable[int], effects: Effects) -> None:
    """Process detected disconnections in place, then recycle held initiators."""
    for l in snapshot:
        if s.lock == l:
            s.lock = None
        if l in s.L:
            s.L = s.L - {l}
        if l in s.R:
            s.R = s.R - {l}
        if s.W:
            s.W = frozenset(e for e in s.W if e[0] != l)
        if l in s.H:
            s.H = s.H - {l}
        if l in s.A:
            s.A = s.A - {l}
        if l in s.C:
            s.C = s.C - {l}
        if s.P:
            s.P = frozenset(e for e in s.P if e[0] != l)
    if not s.C:
        for l in sorted(s.H):
            effects.send(l, READY, helper=True)
        if s.H:
            s.A = s.A | s.H
            s.H = frozenset()
        s.phase = Phase.PREPARE if s.A else None


def guard_holds(s: NodeState, action: ActionId) -> bool:
    """Guard of a state-only action (``Check*`` and the ``CleanUp`` action)."""
    if action is ActionId.CHECK_START:
        return s.state is LockState.PREPARE and s.R == s.L
    if action is ActionId.CHECK_PRIORITIES:
        return s.phase is Phase.COMPETE and len(s.C) == len(s.P)
    if action is ActionId.CHECK_WIN:
        return s.state is LockState.COMPETE and len(s.W) == len(s.L)
    if action is ActionId.CHECK_DONE:
        return s.state is LockState.WIN and s.R == s.L
    if action is ActionId.CHECK_UNLOCKED:
        return s.state is LockState.UNLOCK and s.R == s.L
    if action is ActionId.CLEAN_UP:
        return s.phase is not None or s.state is LockState.UNLOCK
    raise ValueError(f"{action} has no state guard")


class Enabled(NamedTuple):
    actions: list  # (ActionId, incoming item or None)
    pre_enabled: frozenset  # ActionIds enabled only after CleanUp

    def __bool__(self):
        return bool(self.actions)


def enabled_actions(
    s: NodeState,
    pending_messages: Iterable = (),
    lock_api_called: bool = False,
    unlock_api_called: bool = False,
    snapshot: Iterable[int] = (),
    strict: bool = False,
) -> Enabled:
    """Actions whose guards hold, plus those pre-enabled by the detector contents.

    ``pending_messages`` holds deliverable messages as ``(port, Message, ...)``
    tuples; each yields one ``Receive*`` choice carrying the item itself.

    The CleanUp action is also enabled while some action is pre-enabled.
    Otherwise a winner whose own phase is already reset could wait forever
    for an acknowledgment from a neighbor that left.  ``strict`` keeps the
    literal guard.
    """
    actions = []
    if lock_api_called:
        actions.append((ActionId.INIT_LOCK, None))
    if unlock_api_called:
        actions.append((ActionId.INIT_UNLOCK, None))
    for item in pending_messages:
        actions.append((RECEIVE_ACTION[item[1].kind], item))
    disabled = []
    for a in (ActionId.CLEAN_UP,) + CHECK_ACTIONS:
        if guard_holds(s, a):
            actions.append((a, None))
        else:
            disabled.append(a)
    pre = pre_enabled(s, snapshot, disabled)
    if pre and not strict and ActionId.CLEAN_UP in disabled:
        actions.append((ActionId.CLEAN_UP, None))
    return Enabled(actions, pre)


def pre_enabled(s: NodeState, snapshot: Iterable[int], candidates: Iterable[ActionId] = CHECK_ACTIONS) -> frozenset:
    """Check actions among ``candidates`` that CleanUp over ``snapshot`` would enable."""
    snapshot = tuple(snapshot)
    if not snapshot:
        return frozenset()
    candidates = [a for a in candidates if a is not ActionId.CLEAN_UP and not guard_holds(s, a)]
    if not candidates:
        return frozenset()
    cleaned = s.copy()
    clean_up(cleaned, snapshot, Effects())
    return frozenset(a for a in candidates if guard_holds(cleaned, a))


def execute(
    s: NodeState,
    action: ActionId,
    snapshot: Iterable[int] = (),
    incoming: Optional[tuple] = None,
    rng=None,
    *,
    ports: Iterable[int] = (),
    k: int = DEFAULT_K,
    targets: Optional[Iterable[int]] = None,
    strict: bool = False,
) -> tuple[NodeState, Effects]:
    """Run one action execution and return ``(new_state, effects)``.

    ``ports`` lists the node's currently bound port labels (used by
    ``InitLock`` to form the closed neighborhood).  ``targets``, when given,
    restricts ``InitLock`` to ``{0}`` plus those labels.

    By default a participant answers an applicant's first request at once
    with ``win<false>`` when it arrives after other candidates were already
    answered; the applicant asks again and joins the next trial.  ``strict``
    selects the literal pseudocode instead, under which two neighbors that
    lock each other can wait on one another forever.
    """
    action = ActionId(action)
    snapshot = sorted(snapshot)
    if action in RECEIVE_ACTIONS:
        if incoming is None:
            raise NotEnabled(f"{action.value} needs a message")
        port, msg = incoming[0], incoming[1]
        if RECEIVE_ACTION[msg.kind] is not action:
            raise NotEnabled(f"{action.value} cannot consume {msg!r}")
    elif action not in (ActionId.INIT_LOCK, ActionId.INIT_UNLOCK):
        if not guard_holds(s, action):
            if strict or action is not ActionId.CLEAN_UP or not pre_enabled(s, snapshot):
                raise NotEnabled(action.value)

    t = s.copy()
    eff = Effects()

    if action is ActionId.RECEIVE_SET_LOCK:
        t.lock = port
        t.C = t.C - {port}
        clean_up(t, snapshot, eff)
        eff.send(port, ACK_LOCK)
        return t, eff

    clean_up(t, snapshot, eff)

    if action is ActionId.INIT_LOCK:
        if s.state is not None:
            eff.api_result = RequestRejected()
            return t, eff
        bound = set(ports)
        if targets is not None:
            bound &= set(targets)
        t.state = LockState.PREPARE
        t.L = frozenset(bound | {0})
        for l in sorted(t.L):
            eff.send(l, PREPARE)

    elif action is ActionId.RECEIVE_PREPARE:
        if t.phase is Phase.COMPETE:
            t.H = t.H | {port}
        else:
            t.A = t.A | {port}
            t.phase = Phase.PREPARE
            eff.send(port, READY)

    elif action in (ActionId.RECEIVE_READY, ActionId.RECEIVE_ACK_LOCK, ActionId.RECEIVE_ACK_UNLOCK):
        t.R = t.R | {port}

    elif action is ActionId.CHECK_START:
        t.state = LockState.COMPETE
        t.R = frozenset()
        t.W = frozenset()
        _send_requests(t, eff, rng, k)

    elif action is ActionId.CLEAN_UP:
        pass

    elif action is ActionId.RECEIVE_REQUEST:
        late = False
        if port in t.A:
            # A first request is late if some candidate was already answered
            # and has not asked again; the verbatim rule would wait on it.
            late = not strict and bool(t.C - {l for l, _ in t.P})
            t.A = t.A - {port}
            t.C = t.C | {port}
        if late:
            eff.send(port, WIN_FALSE)
        else:
            t.P = t.P | {(port, msg.priority)}
        t.phase = Phase.COMPETE

    elif action is ActionId.CHECK_PRIORITIES:
        winner = _unique_highest(t.P) if t.lock is None else None
        if winner is not None:
            eff.send(winner, WIN_TRUE)
        for l in sorted(t.C):
            if l != winner:
                eff.send(l, WIN_FALSE)
        t.P = frozenset()

    elif action is ActionId.RECEIVE_WIN:
        t.W = t.W | {(port, msg.outcome)}

    elif action is ActionId.CHECK_WIN:
        if any(not b for _, b in t.W):
            _send_requests(t, eff, rng, k)
        else:
            t.state = LockState.WIN
            t.R = frozenset()
            for l in sorted(t.L):
                eff.send(l, SET_LOCK)
        t.W = frozenset()

    elif action is ActionId.CHECK_DONE:
        t.state = LockState.LOCKED
        t.R = frozenset()
        eff.api_result = LockSucceeded(t.L)

    elif action is ActionId.INIT_UNLOCK:
        if s.state is not LockState.LOCKED:
            eff.api_result = RequestRejected()
            return t, eff
        t.state = LockState.UNLOCK
        t.R = frozenset()
        for l in sorted(t.L):
            eff.send(l, RELEASE_LOCK)

    elif action is ActionId.RECEIVE_RELEASE:
        t.lock = None
        eff.send(port, ACK_UNLOCK)

    elif action is ActionId.CHECK_UNLOCKED:
        t.state = None
        t.R = frozenset()
        eff.api_result = UnlockSucceeded()

    return t, eff


def _send_requests(t: NodeState, eff: Effects, rng, k: int) -> None:
    if rng is None:
        raise ValueError("a random source is required to draw a priority")
    p = draw_priority(rng, k)
    m = request_lock(p)
    for l in sorted(t.L):
        eff.send(l, m)


def _unique_highest(pairs: Iterable[tuple[int, int]]) -> Optional[int]:
    best_label, best, tie = None, -1, False
    for l, p in pairs:
        if p > best:
            best_label, best, tie = l, p, False
        elif p == best:
            tie = True
    return None if tie else best_label


# -- wire and memory encodings ----------------------------------------------

KIND_BITS = 3
OUTCOME_BITS = 1


def priority_bits(k: int) -> int:
    return max(0, math.ceil(math.log2(k))) if k > 1 else 0


def message_bits(k: int = DEFAULT_K) -> int:
    """Width of an encoded message; independent of delta."""
    return KIND_BITS + OUTCOME_BITS + priority_bits(k)


def encode_message(m: Message, k: int = DEFAULT_K) -> int:
    """Pack as ``kind(3) | outcome(1) | priority(ceil(log2 k))``, kind most significant."""
    pb = priority_bits(k)
    outcome = 1 if m.outcome else 0
    priority = m.priority or 0
    if not 0 <= priority < max(k, 1):
        raise ValueError(f"priority {priority} outside 0..{k - 1}")
    return (int(m.kind) << (OUTCOME_BITS + pb)) | (outcome << pb) | priority


def decode_message(code: int, k: int = DEFAULT_K) -> Message:
    pb = priority_bits(k)
    if not 0 <= code < (1 << message_bits(k)):
        raise ValueError(f"message code {code} out of range")
    kind = MsgKind(code >> (OUTCOME_BITS + pb))
    outcome = bool((code >> pb) & 1)
    priority = code & ((1 << pb) - 1)
    if kind is MsgKind.REQUEST_LOCK:
        return Message(kind, priority=priority)
    if kind is MsgKind.WIN:
        return Message(kind, outcome=outcome)
    return Message(kind)


def _lock_bits(delta: int) -> int:
    # values: bottom, 0, 1..delta
    return math.ceil(math.log2(delta + 2))


def state_bits(delta: int, k: int = DEFAULT_K) -> int:
    """Bits used by ``encode_state``: registers of width delta+1 plus constants."""
    width = delta + 1
    return _lock_bits(delta) + 3 + 2 + 5 * width + 2 * width + width * (1 + priority_bits(k))


def encode_state(s: NodeState, delta: int, k: int = DEFAULT_K) -> bytes:
    """Bit-register encoding; every set is a (delta+1)-bit mask over labels."""
    width = delta + 1
    pb = priority_bits(k)
    fields = []  # (value, nbits)
    fields.append((0 if s.lock is None else s.lock + 1, _lock_bits(delta)))
    fields.append((0 if s.state is None else int(s.state), 3))
    fields.append((0 if s.phase is None else int(s.phase), 2))
    for reg in (s.L, s.R, s.H, s.A, s.C):
        fields.append((_mask(reg, width), width))
    fields.append((_mask((l for l, _ in s.W), width), width))
    fields.append((_mask((l for l, b in s.W if b), width), width))
    pmap = dict(s.P)
    fields.append((_mask(pmap, width), width))
    for l in range(width):
        fields.append((pmap.get(l, 0), pb))
    value, nbits = 0, 0
    for v, n in fields:
        if v >> n:
            raise ValueError(f"value {v} does not fit in {n} bits (delta={delta})")
        value = (value << n) | v
        nbits += n
    assert nbits == state_bits(delta, k)
    return value.to_bytes((nbits + 7) // 8, "big")


def decode_state(data: bytes, delta: int, k: int = DEFAULT_K) -> NodeState:
    width = delta + 1
    pb = priority_bits(k)
    nbits = state_bits(delta, k)
    value = int.from_bytes(data, "big")
    pos = nbits

    def take(n):
        nonlocal pos
        pos -= n
        return (value >> pos) & ((1 << n) - 1)

    lock = take(_lock_bits(delta))
    st = take(3)
    ph = take(2)
    regs = [_unmask(take(width), width) for _ in range(5)]
    w_present = _unmask(take(width), width)
    w_true = _unmask(take(width), width)
    p_present = _unmask(take(width), width)
    prios = [take(pb) for _ in range(width)]
    return NodeState(
        lock=None if lock == 0 else lock - 1,
        state=None if st == 0 else LockState(st),
        phase=None if ph == 0 else Phase(ph),
        L=regs[0],
        R=regs[1],
        H=regs[2],
        A=regs[3],
        C=regs[4],
        W=frozenset((l, l in w_true) for l in w_present),
        P=frozenset((l, prios[l]) for l in p_present),
    )


def _mask(labels: Iterable[int], width: int) -> int:
    m = 0
    for l in labels:
        if not 0 <= l < width:
            raise ValueError(f"label {l} outside 0..{width - 1}")
        m |= 1 << l
    return m


def _unmask(m: int, width: int) -> frozenset:
    return frozenset(l for l in range(width) if m >> l & 1)


def lock_ports(result: object) -> Optional[frozenset]:
    return result.ports if isinstance(result, LockSucceeded) else None


def result_code(result: object) -> Optional[str]:
    """Stable string form of an API result for traces."""
    if result is None:
        return None
    if isinstance(result, LockSucceeded):
        return "lock:" + ",".join(str(l) for l in sorted(result.ports))
    if isinstance(result, UnlockSucceeded):
        return "unlock"
    if isinstance(result, RequestRejected):
        return "rejected"
    raise TypeError(result)


def parse_result(code: Optional[str]) -> object:
    if code is None:
        return None
    if code.startswith("lock:"):
        body = code[5:]
        return LockSucceeded(frozenset(int(x) for x in body.split(",") if x))
    if code == "unlock":
        return UnlockSucceeded()
    if code == "rejected":
        return RequestRejected()
    raise ValueError(f"unknown result code {code!r}")


__all__ = [
    "ActionId",
    "DEFAULT_K",
    "DuplicateSendOnPort",
    "Effects",
    "Enabled",
    "LockState",
    "LockSucceeded",
    "Message",
    "MsgKind",
    "NodeState",
    "NotEnabled",
    "Phase",
    "RequestRejected",
    "UnlockSucceeded",
    "clean_up",
    "decode_message",
    "decode_state",
    "draw_priority",
    "enabled_actions",
    "encode_message",
    "encode_state",
    "execute",
    "guard_holds",
    "pre_enabled",
    "message_bits",
    "state_bits",
]
