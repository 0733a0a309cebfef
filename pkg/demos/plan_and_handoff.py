"""Planner-gated execution on GridChain-2.

The symbolic planner drives the robot through the easy parts of the task and
hands control to a learned policy only for the insertion sections.  This
script prints the plan from a reset state, renders the first handoff, and
runs the gated loop with the scripted expert standing in for a policy.
"""

# %%
# A reset state and its plan.  Actions marked as learned are the handoffs.
from spire import planner
from spire.envs import GridChain, ScriptedExpert

env = GridChain(k=2)
env.reset(0)
p = planner.plan(env.state, env.task, env.model)
print(p)

# %%
# Executing the traditional prefix lands exactly in the precondition set of
# the first learned section.
s, learned = planner.run_prefix(p, env.state, env.model)
print("first handoff:", learned)
print(env.render_ascii(s))

# %%
# The full gated loop.  The reward is 1 only when a section's effect set is
# reached, so the agent-step count is the cost that finetuning tries to cut.
result = planner.run_spire(env, ScriptedExpert(env).agent(env))
print(result)

# %%
# Validity by exhaustive search: every plan prefix reaches the next section's
# preconditions and every section effect leads on to the goal.
print(planner.verify_planner_validity(env))
