# %% [markdown]
# # Applications: isolated interactions and a blocking client
#
# ## Rumor spreading
#
# Each agent locks its neighborhood, talks to the locked neighbor on its
# lowest port, then unlocks. The transition table comes from a small file.

# %%
from pathlib import Path

from localmutex import LockClient, Scenario, ScheduleConfig, Simulation
from localmutex.apps import load_agent_program, run_population

here = Path(__file__).resolve().parent if "__file__" in globals() else Path("demos")
rumor = load_agent_program(here / "data" / "rumor.yaml")
informed = rumor.state_index("informed")

res = run_population(
    rumor,
    Scenario(16, 4, p_add=0.02, p_del=0.02),
    ScheduleConfig(seed=5, horizon=5000),
    ["informed"] + ["susceptible"] * 15,
    stop_when=lambda states: all(s == informed for s in states),
)
print(f"everyone informed after {res.rounds} rounds, {len(res.interactions)} interactions, {res.solo_locks} solo locks")
print("matching or isolation violations:", len(res.violations))

# %% [markdown]
# Who told whom, in order of first contact:

# %%
told = {0: None}
for rec in res.interactions:
    if rec.before != rec.after:
        new = rec.responder if rec.before[0] == informed else rec.initiator
        told.setdefault(new, rec.initiator if new == rec.responder else rec.responder)
for node, source in told.items():
    if source is not None:
        print(f"node {node:2d} learned from node {source}")

# %% [markdown]
# ## Lock and Unlock as blocking calls
#
# `client_lock` steps the simulation until CheckDone fires and returns the
# locked nodes; `client_unlock` waits for CheckUnlocked.

# %%
sim = Simulation(Scenario(4, 3, [(0, 1), (1, 2), (2, 3), (0, 2)]), ScheduleConfig(seed=3))
client = LockClient(sim)
start = sim.round
print("node 2 locked", sorted(client.client_lock(2)), f"after {sim.round - start} rounds")
client.client_unlock(2)

# two initiators sharing neighbors: both finish, never holding a node at once
a, b = client.request_lock(0), client.request_lock(3)
client.wait(a)
print("node 0 locked", sorted(a.result), "at round", sim.round)
client.client_unlock(0)
client.wait(b)
print("node 3 locked", sorted(b.result), "at round", sim.round)
