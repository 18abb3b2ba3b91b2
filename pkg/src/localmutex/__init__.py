"""Local mutual exclusion on time-varying graphs, simulated deterministically.

Modules:

* ``tvg``: dynamic graph with ports, detectors and lossy channels.
* ``protocol``: the per-node Lock/Unlock state machine.
* ``scheduler``: seeded adversary, traces, replay and async reduction.
* ``checker``: runtime monitors for the correctness properties.
* ``apps``: population-protocol pairing and a blocking lock client.
* ``cli``: ``python -m localmutex run|stats``.
"""

from .apps import RUMOR, AgentProgram, Busy, LockClient, PopulationLayer, RepeatedLocking, run_population
from .checker import Monitor, Violation, lock_sets, open_trial_bound, slow_threshold, symmetric_contest
from .protocol import ActionId, Effects, LockState, Message, MsgKind, NodeState, execute
from .scheduler import Mode, ScheduleConfig, Simulation, TraceRecorder, read_trace, reduce_to_semisync, replay
from .tvg import Scenario, Topology, load_scenario

__version__ = "0.1.0"

__all__ = [
    "RUMOR",
    "ActionId",
    "AgentProgram",
    "Busy",
    "Effects",
    "LockClient",
    "LockState",
    "Message",
    "Mode",
    "Monitor",
    "MsgKind",
    "NodeState",
    "PopulationLayer",
    "RepeatedLocking",
    "Scenario",
    "ScheduleConfig",
    "Simulation",
    "Topology",
    "TraceRecorder",
    "Violation",
    "execute",
    "load_scenario",
    "lock_sets",
    "open_trial_bound",
    "read_trace",
    "reduce_to_semisync",
    "replay",
    "run_population",
    "slow_threshold",
    "symmetric_contest",
]
