# %% [markdown]
# # Two neighbors locking each other
#
# Two nodes joined by one edge both call Lock over and over. We watch the
# actions each node executes and the lock sets the checker reads off the
# lock variables.

# %%
from collections import Counter

from localmutex import Monitor, RepeatedLocking, Scenario, ScheduleConfig, Simulation, lock_sets
from localmutex.checker import check_dependency_dag

scenario = Scenario(node_count=2, delta=2, edges=[(0, 1)])

# %% [markdown]
# ## One Lock call, step by step
#
# With the ALL activation policy every node with something enabled acts in
# every round. Idle CleanUp executions are left out of the listing.

# %%
sim = Simulation(scenario, ScheduleConfig(activation="all", seed=1))


class Printer:
    def on_execution(self, sim, ex):
        if ex.before == ex.after and not ex.effects.sends:
            return  # an idle CleanUp
        sends = ", ".join(f"{m}->{p}" for p, m in ex.effects.sends) or "-"
        print(f"round {ex.start:3d}  node {ex.node}  {ex.action.value:<16} sends {sends}")

    def on_round(self, sim):
        pass


sim.observers.append(Printer())
sim.call(0, "lock")
while sim.states[0].state is None or sim.states[0].state.name != "LOCKED":
    sim.step()
print("lock sets:", lock_sets(sim))

# %% [markdown]
# ## Both nodes competing, many times
#
# Now both nodes re-issue Lock after each Unlock. The monitor runs every
# checker once per round.

# %%
def contend(strict, seed=7, horizon=800):
    sim = Simulation(scenario, ScheduleConfig(seed=seed, horizon=horizon, strict_pseudocode=strict))
    mon = Monitor()
    sim.observers.append(mon)
    RepeatedLocking(cutoff=horizon // 2).attach(sim)
    sim.run()
    return sim, mon


sim, mon = contend(strict=False)
print("lockout summary:", mon.lockout(sim.round))
print("violations:", mon.violation_counts())

# %% [markdown]
# ## The literal pseudocode on the same seed
#
# Taken literally, a participant that has already answered its own initiator
# waits for that initiator's next request before it answers a neighbor whose
# first request arrived late. When both nodes do this at once they wait on
# each other forever. The library answers such a late request with
# `win<false>` right away; `strict_pseudocode=True` restores the literal rule.

# %%
sim, mon = contend(strict=True)
print("final states:", [s.state.name for s in sim.states])
print("lockout summary:", mon.lockout(sim.round))
print("waits-for cycle:", check_dependency_dag(sim)[0])
print("violation kinds:", Counter(v.kind for v in mon.violations))
