"""Verification battery behind ``spire verify``.

Each check returns ``(name, passed, detail)``.  The same functions back the
unit and acceptance tests.
"""

from __future__ import annotations

import os
import time

import numpy as np

from . import planner as _planner
from .envs import GridChain, PointChain, ScriptedExpert, SyntheticChain
from .finetune import gail_discriminator_oracle, kl_divergence
from .imitation import bc_grad, bc_loss
from .nn import flatten
from .policies import GaussianMLPPolicy, TabularPolicy

DISCRETE_DOMAINS = (("GridChain-1", dict(k=1)), ("GridChain-2", dict(k=2)), ("GridChain-3", dict(k=3)))


# ---------------------------------------------------------------------------
# finite differences


def numeric_grad(f, params, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            fp = f()
            p[i] = old - eps
            fm = f()
            p[i] = old
            g[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def rel_error(a, b):
    a, b = flatten(a), flatten(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def bc_gradient_error(kind="tabular", seed=0, batch=8):
    """Relative error between analytic and finite-difference BC gradients."""
    rng = np.random.default_rng(seed)
    if kind == "tabular":
        pol = TabularPolicy(6, 4, rng.normal(size=(6, 4)))
        obs = rng.integers(0, 6, size=batch)
        acts = rng.integers(0, 4, size=batch)
    else:
        pol = GaussianMLPPolicy(3, 2, (8, 8), std=0.3, rng=seed)
        obs = rng.normal(size=(batch, 3))
        acts = rng.uniform(-1, 1, size=(batch, 2))
    analytic = bc_grad(pol, obs, acts)
    numeric = numeric_grad(lambda: bc_loss(pol, obs, acts), pol.params)
    return rel_error(analytic, numeric)


# ---------------------------------------------------------------------------
# actor-critic estimator on a small MDP


class SmallMDP:
    """3 states, 2 actions, reward 1 on entering the absorbing success state 2.

    Episodes are truncated after ``horizon`` steps.
    """

    def __init__(self, horizon=6, gamma=0.9):
        self.S, self.A = 3, 2
        self.horizon, self.gamma = horizon, gamma
        P = np.zeros((3, 2, 3))
        P[0, 0] = [0.8, 0.2, 0.0]
        P[0, 1] = [0.3, 0.7, 0.0]
        P[1, 0] = [0.5, 0.2, 0.3]
        P[1, 1] = [0.1, 0.3, 0.6]
        P[2, :, 2] = 1.0
        self.P = P

    def values(self, probs):
        """Time-indexed state values ``V[t, s]`` and action values ``Q[t, s, a]``."""
        H, g = self.horizon, self.gamma
        V = np.zeros((H + 1, 3))
        Q = np.zeros((H, 3, 2))
        for t in range(H - 1, -1, -1):
            r = self.P[:, :, 2].copy()  # probability of entering the success state
            r[2] = 0.0
            cont = self.P.copy()
            cont[:, :, 2] = 0.0
            Q[t] = r + g * cont @ V[t + 1]
            Q[t, 2] = 0.0
            V[t] = (probs * Q[t]).sum(axis=1)
        return V, Q

    def objective(self, policy, start=0):
        probs = policy.probs(np.arange(3))
        V, _ = self.values(probs)
        return V[0, start]


def actor_gradient_check(n_episodes=100_000, n_step=3, seed=0):
    """Relative error of the n-step advantage likelihood-ratio gradient.

    Samples on-policy episodes, weights each step's score by
    ``gamma^t * (R_n + gamma^n V(s_n) - V(s))`` with the exact critic and
    compares with central differences of the exact objective.
    """
    mdp = SmallMDP()
    rng = np.random.default_rng(seed)
    pol = TabularPolicy(3, 2, rng.normal(scale=0.5, size=(3, 2)))
    probs = pol.probs(np.arange(3))
    V, _ = mdp.values(probs)
    H, g = mdp.horizon, mdp.gamma
    N = n_episodes
    s = np.zeros(N, dtype=int)
    alive = np.ones(N, dtype=bool)
    S_hist = np.zeros((H, N), dtype=int)
    A_hist = np.zeros((H, N), dtype=int)
    R_hist = np.zeros((H, N))
    live_hist = np.zeros((H, N), dtype=bool)
    for t in range(H):
        a = (rng.uniform(size=N) > probs[s, 0]).astype(int)
        cum = np.cumsum(mdp.P[s, a], axis=1)
        s2 = (rng.uniform(size=(N, 1)) > cum).sum(axis=1)
        S_hist[t], A_hist[t], live_hist[t] = s, a, alive
        R_hist[t] = alive & (s2 == 2)
        alive = alive & (s2 != 2)
        s = np.where(alive, s2, 2)
    S_hist_next = np.vstack([S_hist[1:], np.full((1, N), 2)])
    S_hist_next = np.where(live_hist, S_hist_next, 2)
    grad = np.zeros_like(pol.table)
    for t in range(H):
        ret = np.zeros(N)
        for m in range(n_step):
            if t + m < H:
                ret += g**m * R_hist[t + m] * live_hist[t + m]
        tail = t + n_step
        if tail < H:
            v_tail = np.where(live_hist[tail] if tail < H else False, V[tail, S_hist[tail]], 0.0)
            ret += g**n_step * v_tail
        adv = ret - V[t, S_hist[t]]
        w = np.where(live_hist[t], g**t * adv, 0.0) / N
        grad += pol.grad_log_prob(S_hist[t], A_hist[t], w)[0]
    numeric = numeric_grad(lambda: mdp.objective(pol), pol.params)[0]
    return rel_error([grad], [numeric])


# ---------------------------------------------------------------------------
# KL properties


def kl_checks(seed=0, trials=50):
    """Minimum KL over random categorical pairs and max |grad| of the penalty at the reference."""
    rng = np.random.default_rng(seed)
    min_kl = np.inf
    max_grad = 0.0
    for _ in range(trials):
        p = TabularPolicy(5, 4, rng.normal(scale=2, size=(5, 4)))
        q = TabularPolicy(5, 4, rng.normal(scale=2, size=(5, 4)))
        min_kl = min(min_kl, kl_divergence(p, q, np.arange(5)))
        same = q.copy()
        g = same.grad_kl(q, np.arange(5), np.ones(5))[0]
        max_grad = max(max_grad, float(np.max(np.abs(g))))
    return min_kl, max_grad


# ---------------------------------------------------------------------------
# domain checks


def oracle_all_initial(env):
    """Fraction of admissible initial states from which the oracle reaches the goal."""
    expert = ScriptedExpert(env, 0.0)
    if isinstance(env, GridChain):
        starts = [s for s in env.enumerate_states() if env.task.initial_set(s)]
    else:
        starts = [env.sample_initial(np.random.default_rng(i)) for i in range(100)]
    ok = sum(_planner.oracle_rollout(env, expert.agent(env), s, seed=0) for s in starts)
    return ok / len(starts), len(starts)


def reward_sparsity(env, episodes=20, seed=0):
    """Random-agent transitions: rewards in {0, 1} and reward == effect membership."""
    rng = np.random.default_rng(seed)
    n = 0
    for ep in range(episodes):
        env.reset(seed * 1000 + ep)
        while not env.task.goal_set(env.state):
            p = _planner.plan(env.state, env.task, env.model)
            s, learned = _planner.run_prefix(p, env.state, env.model)
            env.set_state(s)
            if learned is None:
                continue
            env.begin_section(learned.section)
            spec = env.task.section(learned.section)
            while env.active_section is not None:
                if env.discrete:
                    a = int(rng.integers(env.n_actions))
                else:
                    a = rng.uniform(-1, 1, env.action_dim)
                tr = env.step(a)
                n += 1
                if tr.reward not in (0, 1) or (tr.reward == 1) != bool(spec.effect(tr.next_state)):
                    return False, n
            if tr.reward != 1:
                break
    return True, n


def fifo_conservation(n_workers=8, episodes=200, seed=0):
    """Fuzzed inline run; checks served + rejected == popped and FIFO order."""
    from .scheduler import InlinePool, Scheduler, Sequential, Trace

    trace = Trace(keep_steps=False)
    pool = InlinePool(lambda i: SyntheticChain((0.7, 0.5, 0.6), step_limit=3), n_workers, seed=seed, fuzz=seed, trace=trace)
    rng = np.random.default_rng(seed)
    sched = Scheduler(pool, lambda obs, section: int(rng.integers(2)), Sequential(0.6, 20, 5), trace=trace)
    st = sched.run(max_items=n_workers * episodes)
    enq = [r["seq"] for r in trace.of("enqueue")]
    decided = [r["seq"] for r in trace.records if r["event"] in ("accept", "reject")]
    fifo = decided == enq[: len(decided)]
    conserved = st.served + st.rejected == st.popped and len(decided) == st.popped
    return conserved and fifo, st


def section_frequency(success_rates=(0.9, 0.5), items=20_000, n_workers=8, seed=0):
    """Empirical vs closed-form section frequencies (max absolute gap)."""
    from .scheduler import InlinePool, Permissive, Scheduler, section_frequency_law

    pool = InlinePool(lambda i: SyntheticChain(success_rates, step_limit=1), n_workers, seed=seed)
    st = Scheduler(pool, lambda obs, section: 0, Permissive()).run(max_items=items)
    counts = np.array([st.section_counts.get(j, 0) for j in range(1, len(success_rates) + 1)], dtype=float)
    emp = counts / counts.sum()
    law = section_frequency_law(success_rates)
    return float(np.max(np.abs(emp - law))), emp, law


def gail_random_mdps(n=3, seed=0):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        S = int(rng.integers(2, 11))
        A = int(rng.integers(2, 5))
        pi = rng.dirichlet(np.ones(A), size=S)
        rho = rng.dirichlet(np.ones(S))
        errs.append(gail_discriminator_oracle(pi, rho).max_error)
    return errs


# ---------------------------------------------------------------------------


def run_all(summary_dir=None):
    results = []

    def check(name, fn):
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"raised {exc!r}"
        results.append((name, passed, f"{detail} ({time.perf_counter() - t0:.1f}s)"))

    for name, params in DISCRETE_DOMAINS:
        env = GridChain(**params)

        def validity(env=env):
            rep = _planner.verify_planner_validity(env)
            return rep.all_valid, (
                f"sequence={rep.sequence_valid} section={rep.section_valid} goal={rep.goal_valid} "
                f"over {rep.n_states} states"
            )

        def oracle(env=env):
            frac, n = oracle_all_initial(env)
            return frac == 1.0, f"oracle succeeded from {frac:.0%} of {n} admissible initial states"

        check(f"planner validity {name}", validity)
        check(f"oracle rollouts {name}", oracle)

    def oracle_pc():
        frac, n = oracle_all_initial(PointChain(k=2))
        return frac == 1.0, f"oracle succeeded from {frac:.0%} of {n} sampled initial states"

    check("oracle rollouts PointChain-2", oracle_pc)

    def gail():
        errs = gail_random_mdps(3)
        return max(errs) < 1e-3, "max |D - pi_E| per MDP: " + ", ".join(f"{e:.1e}" for e in errs)

    check("discriminator oracle", gail)

    def bc_fd():
        e1, e2 = bc_gradient_error("tabular"), bc_gradient_error("gaussian")
        return max(e1, e2) < 1e-4, f"relative error tabular {e1:.1e}, gaussian {e2:.1e}"

    check("BC gradient vs finite differences", bc_fd)

    def ac_fd():
        e = actor_gradient_check()
        return e < 5e-2, f"relative error {e:.3f}"

    check("actor gradient vs finite differences", ac_fd)

    def kl():
        mn, mg = kl_checks()
        return mn >= 0 and mg < 1e-6, f"min KL {mn:.3e}, max penalty gradient at reference {mg:.1e}"

    check("KL properties", kl)

    def rewards():
        ok_g, n_g = reward_sparsity(GridChain(k=2))
        ok_p, n_p = reward_sparsity(PointChain(k=2), episodes=5)
        return ok_g and ok_p, f"{n_g + n_p} random-agent transitions checked"

    check("reward sparsity", rewards)

    def fifo():
        ok, st = fifo_conservation()
        return ok, f"popped {st.popped} = served {st.served} + rejected {st.rejected}"

    check("FIFO conservation (8 fuzzed workers)", fifo)

    def freq():
        gap, emp, law = section_frequency(items=10_000)
        return gap < 0.02, f"empirical {np.round(emp, 4).tolist()} vs law {np.round(law, 4).tolist()}"

    check("section-frequency law", freq)

    if summary_dir:
        from .harness import check_summary

        for fname in sorted(os.listdir(summary_dir)):
            if fname.endswith("_summary.csv"):
                per_seed = os.path.join(summary_dir, fname.replace("_summary", ""))
                summ = os.path.join(summary_dir, fname)

                def cross(per_seed=per_seed, summ=summ):
                    return check_summary(per_seed, summ), f"{os.path.basename(summ)} recomputed"

                check(f"summary cross-check {fname}", cross)
    return results
