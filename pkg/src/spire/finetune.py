"""KL-regularised sparse-reward finetuning of a behavior-cloned policy.

Objective: ``J(theta) - alpha * KL(pi_theta || pi_ref)``.  The learner is an
n-step actor-critic: a state-value critic regressed on n-step bootstrapped
targets and a likelihood-ratio actor weighted by the n-step advantage.
Sections that end in success do not bootstrap; truncated ones do.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import threading
import time
import warnings
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArchitectureMismatch, ConfigError
from .nn import MLP, LinearSchedule, global_norm, make_optimizer
from .policies import (
    CategoricalPolicy,
    GaussianMLPPolicy,
    GaussianPolicy,
    ResidualCategoricalPolicy,
    ResidualGaussianPolicy,
    TabularPolicy,
    save_policy,
)

log = logging.getLogger(__name__)

INIT = "init"
RESIDUAL = "residual"


# ---------------------------------------------------------------------------
# warmstart and KL


def architecture(policy) -> dict:
    if isinstance(policy, TabularPolicy):
        return {"kind": "tabular", "n_obs": policy.n_obs, "n_actions": policy.n_actions}
    if isinstance(policy, GaussianMLPPolicy):
        return {"kind": "gaussian_mlp", "sizes": list(policy.net.sizes)}
    if isinstance(policy, (ResidualGaussianPolicy, ResidualCategoricalPolicy)):
        return architecture(policy.reference)
    return {"kind": getattr(policy, "kind", type(policy).__name__)}


def warmstart(bc, mode=INIT, target_arch=None, seed=0, residual_scale=1e-4):
    """Build the RL policy from a trained BC policy.

    ``init`` copies the parameters; ``target_arch`` (an :func:`architecture`
    dict) is checked against the BC network when given.  ``residual`` pins a
    frozen copy of ``bc`` as reference and adds a fresh residual whose output
    is close to zero.
    """
    if getattr(bc, "kind", "") == "per_section":
        raise ConfigError("finetuning needs a single shared policy")
    if mode == INIT:
        if target_arch is not None and target_arch != architecture(bc):
            raise ArchitectureMismatch(f"BC architecture {architecture(bc)} != {target_arch}")
        return bc.copy()
    if mode == RESIDUAL:
        ref = bc.copy()
        if isinstance(bc, GaussianPolicy):
            res = GaussianMLPPolicy(
                bc.obs_dim, bc.action_dim, bc.hidden, std=bc.std, rng=seed, out_scale=residual_scale
            )
            return ResidualGaussianPolicy(ref, res)
        if isinstance(bc, TabularPolicy):
            return ResidualCategoricalPolicy(ref, TabularPolicy(bc.n_obs, bc.n_actions))
        raise ConfigError(f"no residual form for {type(bc).__name__}")
    raise ConfigError(f"unknown warmstart mode {mode!r}")


def kl_divergence(p, q, states, n_samples=64, rng=None) -> float:
    """Mean KL(p || q) over ``states``.

    Exact for categorical policies; Monte Carlo with ``n_samples`` draws per
    state for Gaussian ones (unclipped densities).  Returns ``inf`` with a
    warning when ``p`` puts mass where ``q`` has none.
    """
    if isinstance(p, CategoricalPolicy):
        lp = p.log_probs_all(states)
        lq = q.log_probs_all(states)
        support = np.exp(lp) > 0
        if np.any(support & np.isneginf(lq)):
            warnings.warn("KL support violation: q has zero mass where p does", RuntimeWarning)
            return math.inf
        with np.errstate(invalid="ignore"):
            terms = np.where(support, np.exp(lp) * (lp - lq), 0.0)
        return float(terms.sum(axis=1).mean())
    rng = np.random.default_rng(rng)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    mu_p = p.mean(states)
    total = 0.0
    for _ in range(n_samples):
        a = mu_p + p.std * rng.standard_normal(mu_p.shape)
        total += float(np.mean(p.log_prob(states, a) - q.log_prob(states, a)))
    est = total / n_samples
    if not np.isfinite(est):
        warnings.warn("KL estimate is not finite", RuntimeWarning)
        return math.inf
    return est


# ---------------------------------------------------------------------------
# critic


class TabularCritic:
    kind = "tabular"

    def __init__(self, n_obs):
        self.table = np.zeros(int(n_obs))
        self.params = [self.table]

    def value(self, obs):
        return self.table[np.asarray(obs, dtype=int).reshape(-1)]

    def grad(self, obs, targets):
        """Gradient of ``0.5 * mean((V - target)^2)``; also returns the loss."""
        idx = np.asarray(obs, dtype=int).reshape(-1)
        err = self.table[idx] - targets
        g = np.zeros_like(self.table)
        np.add.at(g, idx, err / len(idx))
        return [g], float(0.5 * np.mean(err**2))


class MLPCritic:
    kind = "mlp"

    def __init__(self, obs_dim, hidden=(64, 64), seed=0):
        self.net = MLP((obs_dim, *hidden, 1), seed, out_scale=0.1)
        self.params = self.net.params

    def value(self, obs):
        return self.net(obs)[:, 0]

    def grad(self, obs, targets):
        out, acts = self.net.forward(obs)
        err = out[:, 0] - targets
        grads = self.net.backward(acts, (err / len(err))[:, None])
        return grads, float(0.5 * np.mean(err**2))


class IndexedMLPCritic(MLPCritic):
    """MLP value network over a fixed feature table for index observations."""

    kind = "indexed_mlp"

    def __init__(self, features, hidden=(64, 64), seed=0):
        self.features = np.asarray(features, dtype=float)
        super().__init__(self.features.shape[1], hidden, seed)

    def value(self, obs):
        return super().value(self.features[np.asarray(obs, dtype=int).reshape(-1)])

    def grad(self, obs, targets):
        return super().grad(self.features[np.asarray(obs, dtype=int).reshape(-1)], targets)


def make_critic(policy, seed=0, features=None):
    """Tabular critic for tables unless a feature table is given; MLP otherwise."""
    ref = policy.reference if hasattr(policy, "reference") else policy
    if isinstance(ref, TabularPolicy):
        if features is not None:
            return IndexedMLPCritic(features, seed=seed)
        return TabularCritic(ref.n_obs)
    return MLPCritic(ref.obs_dim, ref.hidden, seed)


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class NStepItem:
    obs: object
    action: object
    reward: int  # first-step reward, always 0 or 1
    ret: float  # discounted n-step reward sum
    next_obs: object
    discount: float  # gamma^m for a bootstrapped tail, 0 when the section ended in success
    section: int


class NStepAccumulator:
    """Turns per-worker transition streams into n-step items."""

    def __init__(self, n, gamma):
        if n < 1:
            raise ConfigError("n_step must be >= 1")
        self.n, self.gamma = n, gamma
        self.pending = defaultdict(deque)

    def push(self, worker, obs, tr, next_obs):
        q = self.pending[worker]
        q.append((obs, tr.action, tr.reward, next_obs, tr.section))
        out = []
        if tr.done or tr.truncated:
            while q:
                out.append(self._emit(q, terminal=tr.done))
            del self.pending[worker]
        elif len(q) == self.n:
            out.append(self._emit(q, terminal=False))
        return out

    def _emit(self, q, terminal):
        ret = 0.0
        for m, (_, _, r, _, _) in enumerate(q):
            ret += self.gamma**m * r
        obs, a, r0, _, sec = q[0]
        last_next = q[-1][3]
        disc = 0.0 if terminal else self.gamma ** len(q)
        q.popleft()
        return NStepItem(obs, a, r0, ret, last_next, disc, sec)

    def drop(self, worker):
        self.pending.pop(worker, None)


class ReplayBuffer:
    """Ring buffer with uniform seeded sampling and a mutex around every access."""

    def __init__(self, capacity, seed=0):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.items = [None] * self.capacity
        self.size = 0
        self.pos = 0
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def add(self, item):
        if item.reward not in (0, 1):
            raise ValueError(f"reward {item.reward!r} outside {{0, 1}}")
        with self._lock:
            self.items[self.pos] = item
            self.pos = (self.pos + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def __len__(self):
        return self.size

    def sample(self, batch_size):
        with self._lock:
            if self.size == 0:
                raise ValueError("sampling from an empty replay buffer")
            idx = self.rng.integers(0, self.size, size=batch_size)
            return [self.items[i] for i in idx]


def collate(batch, discrete):
    cast = int if discrete else float
    obs = np.asarray([b.obs for b in batch], dtype=cast)
    nobs = np.asarray([b.next_obs for b in batch], dtype=cast)
    acts = np.asarray([b.action for b in batch], dtype=cast)
    ret = np.asarray([b.ret for b in batch], dtype=float)
    disc = np.asarray([b.discount for b in batch], dtype=float)
    rew = np.asarray([b.reward for b in batch], dtype=float)
    return obs, acts, ret, nobs, disc, rew


# ---------------------------------------------------------------------------
# update


@dataclass
class FinetuneConfig:
    alpha: float = 0.1
    gamma: float = 0.99
    n_step: int = 3
    batch_size: int = 256
    actor_lr: float | None = None  # None: 1e-4 for networks, 0.01 for tables
    critic_lr: float | None = None  # None: 1e-4 for networks, 0.1 for tables
    optimizer: str = "adam"
    replay_capacity: int = 100_000
    seed_frames: int = 4000
    total_frames: int = 20_000
    update_every: int = 1
    std_start: float = 0.2
    std_end: float = 0.1
    std_duration: int = 20_000
    mode: str = INIT
    adaptive_alpha: bool = False
    target_kl: float = 0.05
    eval_every: int = 2000
    eval_rollouts: int = 50
    seed: int = 0
    workers: int = 1
    strategy: str = "permissive"
    seq_threshold: float = 0.8
    seq_window: int = 50
    max_grad_norm: float | None = None
    critic: str = "auto"  # auto (tabular for tables) | tabular | mlp

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.n_step < 1:
            raise ConfigError("n_step must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.mode not in (INIT, RESIDUAL):
            raise ConfigError(f"unknown warmstart mode {self.mode!r}")
        if self.critic not in ("auto", "tabular", "mlp"):
            raise ConfigError(f"unknown critic {self.critic!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class UpdateReport:
    actor_loss: float = math.nan
    critic_loss: float = math.nan
    kl: float = math.nan
    reward_mean: float = math.nan
    aborted: bool = False
    diagnostic: str = ""


class Learner:
    """Owns the RL policy, its frozen reference, the critic and both optimizers."""

    def __init__(self, policy, reference, config: FinetuneConfig, critic=None, features=None):
        self.policy = policy
        self.reference = reference
        self.config = config
        self.alpha = config.alpha
        if critic is None:
            use = features if config.critic == "mlp" else None
            if config.critic == "mlp" and use is None and isinstance(reference, TabularPolicy):
                raise ConfigError("an MLP critic over index observations needs a feature table")
            critic = make_critic(policy, config.seed, use)
        self.critic = critic
        tabular = isinstance(reference, TabularPolicy)
        a_lr = config.actor_lr if config.actor_lr is not None else (0.01 if tabular else 1e-4)
        c_lr = config.critic_lr if config.critic_lr is not None else (0.1 if critic.kind == "tabular" else 1e-4)
        self.actor_opt = make_optimizer(config.optimizer, policy.params, a_lr)
        self.critic_opt = make_optimizer(config.optimizer, self.critic.params, c_lr)
        self.discrete = isinstance(reference, CategoricalPolicy)
        self.updates = 0

    def update(self, batch) -> UpdateReport:
        return finetune_update(self, batch)


def _finite(grads):
    return all(np.all(np.isfinite(g)) for g in grads)


def finetune_update(learner: Learner, batch) -> UpdateReport:
    """One critic step and one actor step on a replay batch.

    Actor loss: ``-mean(A * log pi(a|s)) + alpha * mean KL(pi(.|s) || ref(.|s))``
    with ``A = R_n + gamma^n V(s_n) - V(s)``.  Nothing is applied when any
    gradient is non-finite.
    """
    cfg = learner.config
    pol, ref, critic = learner.policy, learner.reference, learner.critic
    obs, acts, ret, nobs, disc, rew = collate(batch, learner.discrete)
    if np.any((rew != 0) & (rew != 1)):
        raise ValueError("batch holds rewards outside {0, 1}")
    B = len(batch)
    target = ret + disc * critic.value(nobs)
    v = critic.value(obs)
    adv = target - v
    logp = pol.log_prob(obs, acts)
    kl = pol.kl(ref, obs)
    alpha = learner.alpha
    actor_loss = float(-np.mean(adv * logp) + alpha * np.mean(kl))
    g_pg = pol.grad_log_prob(obs, acts, -adv / B)
    if alpha > 0:
        g_kl = pol.grad_kl(ref, obs, np.full(B, alpha / B))
        g_actor = [a + b for a, b in zip(g_pg, g_kl)]
    else:
        g_actor = g_pg
    g_critic, critic_loss = critic.grad(obs, target)
    report = UpdateReport(actor_loss, critic_loss, float(np.mean(kl)), float(np.mean(rew)))
    if not (_finite(g_actor) and _finite(g_critic) and np.isfinite(actor_loss)):
        report.aborted = True
        report.diagnostic = (
            f"non-finite gradient at update {learner.updates}: actor loss {actor_loss}, "
            f"actor grad norm {global_norm(g_actor)}"
        )
        log.error(report.diagnostic)
        return report
    if cfg.max_grad_norm:
        for grads in (g_actor, g_critic):
            norm = global_norm(grads)
            if norm > cfg.max_grad_norm:
                for g in grads:
                    g *= cfg.max_grad_norm / norm
    learner.critic_opt.step(g_critic)
    learner.actor_opt.step(g_actor)
    learner.updates += 1
    if cfg.adaptive_alpha:
        # multiplicative controller keeping the batch KL near target_kl
        if report.kl > 1.5 * cfg.target_kl:
            learner.alpha = max(learner.alpha, 1e-3) * 1.5
        elif report.kl < cfg.target_kl / 1.5:
            learner.alpha /= 1.5
    return report


# ---------------------------------------------------------------------------
# driver


CURVE_COLUMNS = ("env_frames", "wall_seconds", "eval_success_rate", "mean_kl", "actor_loss", "critic_loss")


@dataclass
class FinetuneResult:
    policy: object
    best_frames: int
    best_success: float
    best_duration: float
    curve: list = field(default_factory=list)
    final_policy: object = None
    aborted: bool = False
    error: str = ""
    stats: object = None


def _score(success, duration):
    return (success, -duration if np.isfinite(duration) else -math.inf)


def run_finetuning(
    env_factory,
    bc,
    config: FinetuneConfig | None = None,
    evaluator=None,
    run_dir=None,
    trace=None,
    from_scratch_policy=None,
    pool=None,
):
    """Finetune ``bc`` through the scheduler; returns the best evaluated checkpoint.

    ``env_factory(i)`` builds the environment of worker ``i``.
    ``evaluator(policy) -> (success_rate, mean_duration)`` scores
    checkpoints; the warmstarted policy is scored first so the result is
    never worse than the starting point under the evaluator.  Learning
    happens inline in the consumer of the scheduler's transition stream,
    which keeps runs bit-for-bit reproducible.  With
    ``from_scratch_policy`` the policy is trained with no reference (KL
    term disabled).
    """
    from .scheduler import PolicyHandle, Scheduler, make_pool, make_strategy

    cfg = config or FinetuneConfig()
    if from_scratch_policy is not None:
        policy = from_scratch_policy
        reference = from_scratch_policy.copy()
        cfg = FinetuneConfig(**{**cfg.to_dict(), "alpha": 0.0, "adaptive_alpha": False})
    else:
        policy = warmstart(bc, cfg.mode, seed=cfg.seed)
        reference = bc
    features = None
    if cfg.critic == "mlp" and isinstance(reference, TabularPolicy):
        probe = env_factory(0)
        if hasattr(probe, "feature_table"):
            features = probe.feature_table()
    learner = Learner(policy, reference, cfg, features=features)
    gaussian = isinstance(policy, GaussianPolicy)
    std_sched = LinearSchedule(cfg.std_start, cfg.std_end, cfg.std_duration)
    if gaussian:
        policy.std = std_sched(0)

    handle = PolicyHandle(policy.copy(), mode="sample", seed=cfg.seed)
    own_pool = pool is None
    if own_pool:
        pool = make_pool(env_factory, cfg.workers, "inline", seed=cfg.seed, trace=trace)
    strategy = make_strategy(cfg.strategy, cfg.seq_threshold, cfg.seq_window)
    sched = Scheduler(pool, handle, strategy, trace=trace)
    replay = ReplayBuffer(cfg.replay_capacity, seed=cfg.seed)
    acc = NStepAccumulator(cfg.n_step, cfg.gamma)
    t0 = time.perf_counter()
    curve = []
    last = UpdateReport()
    reports = deque(maxlen=100)
    ckpt_dir = os.path.join(run_dir, "checkpoints") if run_dir else None
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)

    def evaluate(frames, pol):
        if evaluator is None:
            return math.nan, math.nan
        eval_pol = pol.copy()
        if gaussian:
            eval_pol.std = std_sched(frames)
        return evaluator(eval_pol)

    best = {"policy": policy.copy(), "frames": 0, "success": -1.0, "duration": math.inf}

    def checkpoint(frames):
        succ, dur = evaluate(frames, policy)
        mean = lambda k: float(np.mean([getattr(r, k) for r in reports])) if reports else math.nan
        row = {
            "env_frames": frames,
            "wall_seconds": round(time.perf_counter() - t0, 3),
            "eval_success_rate": succ,
            "mean_kl": mean("kl"),
            "actor_loss": mean("actor_loss"),
            "critic_loss": mean("critic_loss"),
        }
        curve.append(row)
        if evaluator is not None and _score(succ, dur) > _score(best["success"], best["duration"]):
            best.update(policy=policy.copy(), frames=frames, success=succ, duration=dur)
            if ckpt_dir:
                save_policy(os.path.join(ckpt_dir, "best.json"), policy, {"env_frames": frames, "config": cfg.to_dict()})
        if ckpt_dir:
            save_policy(os.path.join(ckpt_dir, f"frames_{frames:08d}.json"), policy, {"env_frames": frames})

    checkpoint(0)
    state = {"aborted": False, "diag": ""}

    def on_step(rec):
        nonlocal last
        for item in acc.push(rec.worker, rec.obs, rec.transition, rec.next_obs):
            replay.add(item)
        frames = sched.stats.frames
        if frames >= cfg.seed_frames and frames % cfg.update_every == 0 and len(replay):
            last = learner.update(replay.sample(cfg.batch_size))
            if last.aborted:
                state["aborted"], state["diag"] = True, last.diagnostic
                return False
            reports.append(last)
            if gaussian:
                policy.std = std_sched(frames)
            handle.swap(policy.copy())
        if cfg.eval_every and frames % cfg.eval_every == 0:
            checkpoint(frames)
        return True

    error = ""
    try:
        if cfg.total_frames > 0:
            sched.run(max_frames=cfg.total_frames, on_step=on_step)
    except Exception as exc:  # partial result on environment/planner errors
        log.error("finetuning stopped early: %r", exc)
        error = repr(exc)
    finally:
        if own_pool:
            pool.close()
    frames = sched.stats.frames
    if not curve or curve[-1]["env_frames"] != frames:
        checkpoint(frames)
    if run_dir:
        write_curve(os.path.join(run_dir, "curves.csv"), curve)
    if evaluator is None:
        best["policy"] = policy.copy()
    return FinetuneResult(
        best["policy"],
        best["frames"],
        best["success"],
        best["duration"],
        curve,
        policy,
        state["aborted"],
        error or state["diag"],
        sched.stats,
    )


def write_curve(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CURVE_COLUMNS})


# ---------------------------------------------------------------------------
# discriminator oracle


@dataclass
class GailReport:
    D: np.ndarray
    pi_E: np.ndarray
    max_error: float
    log_error: float
    objective: float
    iterations: int

    @property
    def ok(self):
        return self.max_error < 1e-3


def gail_objective(D, pi_E, rho):
    """``sum_s rho(s) * (-sum_a D(s, a) + sum_a pi_E(a|s) log D(s, a))``.

    The expectation over uniform actions is taken with the unnormalised
    counting measure, matching the integral form of the objective; with a
    normalised uniform the maximiser would be ``|A| * pi_E`` instead.
    """
    return float(np.sum(rho[:, None] * (-D + pi_E * np.log(D))))


def gail_discriminator_oracle(pi_E, rho=None, lr=1.0, tol=1e-12, max_iter=100_000, init=None) -> GailReport:
    """Maximise the discriminator objective over a tabular ``D`` by gradient ascent.

    ``pi_E`` is an ``|S| x |A|`` expert policy with full support; ``rho`` is
    its state visitation distribution (uniform by default).  Ascent runs on
    ``u = log D``, which keeps ``D`` positive, and divides each state's
    gradient by ``rho(s)``; neither changes the fixed point.  The report
    compares the maximiser with ``pi_E``.
    """
    pi_E = np.asarray(pi_E, dtype=float)
    if pi_E.ndim != 2:
        raise ValueError("pi_E must be a |S| x |A| table")
    if np.any(pi_E <= 0):
        raise ValueError("pi_E must have full support")
    if not np.allclose(pi_E.sum(axis=1), 1.0):
        raise ValueError("rows of pi_E must sum to 1")
    S, A = pi_E.shape
    rho = np.full(S, 1.0 / S) if rho is None else np.asarray(rho, dtype=float)
    u = np.log(np.full((S, A), 1.0 / A) if init is None else np.asarray(init, dtype=float))
    it = 0
    for it in range(1, max_iter + 1):
        step = pi_E - np.exp(u)  # (dJ/du) / rho(s)
        u += lr * step
        if np.max(np.abs(step)) < tol:
            break
    D = np.exp(u)
    max_err = float(np.max(np.abs(D - pi_E)))
    log_err = float(np.max(np.abs(np.log(D) - np.log(pi_E))))
    return GailReport(D, pi_E, max_err, log_err, gail_objective(D, pi_E, rho), it)
