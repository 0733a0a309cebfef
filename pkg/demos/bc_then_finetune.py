"""From demonstrations to a finetuned policy.

Collect one noisy expert demonstration, clone it, then run the
KL-regularised actor-critic on top.  Random exploration alone never finds
the sparse reward in a two-section task within the same budget.
"""

# %%
from spire.envs import GridChain, ScriptedExpert
from spire.finetune import FinetuneConfig, run_finetuning
from spire.harness import evaluate_policy
from spire.imitation import BCConfig, collect_demos, train_bc

env = GridChain(k=2)
demos = collect_demos(env, ScriptedExpert(env, epsilon=0.1, seed=0), num_demos=1, seed=0)
print(f"{len(demos)} section trajectories, {sum(len(t.actions) for t in demos)} labelled steps")

# %%
# Behavioral cloning by negative log-likelihood.  One demonstration is not
# enough for the clone to finish the task greedily.
bc = train_bc(demos, BCConfig(seed=0)).policy
print("BC success / duration:", evaluate_policy(bc, env, 50, seed=1))

# %%
# Finetuning with the divergence penalty keeps the policy near the clone
# while the sparse reward sharpens it.
cfg = FinetuneConfig(total_frames=20000, seed_frames=4000, eval_every=4000, alpha=0.1, seed=0)
res = run_finetuning(lambda i: GridChain(k=2), bc, cfg, evaluator=lambda p: evaluate_policy(p, env, 20, seed=1))
print("finetuned success / duration:", evaluate_policy(res.policy, env, 50, seed=1))
for row in res.curve:
    print(row)
