"""Planner-gated demonstration collection and behavioral cloning."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import planner as _planner
from .errors import ConfigError, EmptyDataset, ExpertIncompetent, SpireError
from .nn import LinearSchedule, make_optimizer
from .policies import GaussianMLPPolicy, TabularPolicy

log = logging.getLogger(__name__)

DATASET_FORMAT = "spire-demos"
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DemoTrajectory:
    section: int
    seed: int
    states: list  # encoded states, len(actions) + 1
    observations: list  # policy inputs, len(actions)
    actions: list
    success: bool = True

    @property
    def horizon(self):
        return len(self.actions)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


class DemoDataset:
    """Append-only collection of successful handoff segments.

    Stored as JSON lines: a header record (format, version, domain, metadata,
    count, sha256 checksum of the trajectory lines) followed by one
    trajectory per line.
    """

    def __init__(self, domain: str, meta: dict | None = None):
        self.domain = domain
        self.meta = dict(meta or {})
        self._trajs: list[DemoTrajectory] = []
        self._hash = hashlib.sha256()

    def append(self, traj: DemoTrajectory):
        if not traj.success:
            raise ValueError("only successful segments are stored")
        self._trajs.append(traj)
        self._hash.update(traj.to_json().encode() + b"\n")

    def __len__(self):
        return len(self._trajs)

    def __iter__(self):
        return iter(self._trajs)

    def __getitem__(self, i):
        return self._trajs[i]

    @property
    def checksum(self) -> str:
        return self._hash.hexdigest()

    def counts(self) -> dict:
        out = {}
        for t in self._trajs:
            out[t.section] = out.get(t.section, 0) + 1
        return out

    def pairs(self, section=None):
        """Flattened ``(observations, actions, sections)`` arrays."""
        obs, acts, secs = [], [], []
        for t in self._trajs:
            if section is not None and t.section != section:
                continue
            obs.extend(t.observations)
            acts.extend(t.actions)
            secs.extend([t.section] * t.horizon)
        return obs, acts, secs

    def subset(self, per_section: int) -> "DemoDataset":
        """First ``per_section`` trajectories of every section."""
        out = DemoDataset(self.domain, self.meta)
        seen = {}
        for t in self._trajs:
            if seen.get(t.section, 0) < per_section:
                out.append(t)
                seen[t.section] = seen.get(t.section, 0) + 1
        return out

    def save(self, path):
        header = {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "domain": self.domain,
            "meta": self.meta,
            "count": len(self),
            "checksum": self.checksum,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for t in self._trajs:
                fh.write(t.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DemoDataset":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != DATASET_FORMAT:
                raise ValueError(f"{path} is not a demo dataset")
            if header.get("version", 0) > DATASET_VERSION:
                raise ValueError(f"dataset version {header['version']} is newer than supported")
            ds = cls(header["domain"], header.get("meta"))
            for line in fh:
                if line.strip():
                    ds.append(DemoTrajectory.from_json(line))
        if len(ds) != header["count"] or ds.checksum != header["checksum"]:
            raise ValueError(f"{path}: checksum mismatch, file is corrupt or was edited")
        return ds


def _encode_obs(obs):
    if isinstance(obs, (int, np.integer)):
        return int(obs)
    return np.asarray(obs, dtype=float).tolist()


def _encode_action(a):
    if isinstance(a, (int, np.integer)):
        return int(a)
    return np.asarray(a, dtype=float).tolist()


def collect_demos(env, expert, num_demos: int, seed: int = 0, window: int = 50, max_episodes=None) -> DemoDataset:
    """Run the planner loop with ``expert`` on handoffs and keep successful segments.

    Exactly ``num_demos`` segments are stored per section.  Traditional
    actions are executed by the planner and not recorded.  Failed segments
    are discarded; the episode is then restarted from a fresh reset.
    """
    if num_demos < 0:
        raise ValueError("num_demos must be non-negative")
    task, model = env.task, env.model
    n = task.num_sections
    meta = {
        "obs_kind": "index" if env.discrete else "vector",
        "n_obs": int(getattr(env, "n_obs", 0)) if env.discrete else 0,
        "obs_dim": int(env.obs_dim),
        "n_actions": int(env.n_actions),
        "action_dim": int(env.action_dim),
        "num_sections": n,
        "num_demos": num_demos,
        "seed": seed,
        "epsilon": float(getattr(expert, "epsilon", 0.0)),
    }
    ds = DemoDataset(env.name, meta)
    counts = {i: 0 for i in range(1, n + 1)}
    outcomes = deque(maxlen=window)
    act = expert.act if hasattr(expert, "act") else expert
    max_episodes = max_episodes or 1000 * max(num_demos, 1) * n
    episode = 0
    while any(c < num_demos for c in counts.values()):
        if episode >= max_episodes:
            raise ExpertIncompetent(f"gave up after {episode} episodes with counts {counts}")
        ep_seed = seed * 1_000_003 + episode
        episode += 1
        env.reset(ep_seed)
        while True:
            s = env.state
            if task.goal_set(s):
                break
            p = _planner.plan(s, task, model)
            s, learned = _planner.run_prefix(p, s, model)
            env.set_state(s)
            if learned is None:
                continue
            i = learned.section
            env.begin_section(i)
            states, obs, acts = [env.encode_state(s)], [], []
            while True:
                o = env.observe()
                a = act(env.state, i)
                tr = env.step(a)
                obs.append(_encode_obs(o))
                acts.append(_encode_action(tr.action))
                states.append(env.encode_state(tr.next_state))
                if tr.done or tr.truncated:
                    break
            ok = tr.reward == 1
            outcomes.append(ok)
            if len(outcomes) == window and sum(outcomes) < 0.1 * window:
                raise ExpertIncompetent(f"expert failure rate above 90% over the last {window} segments")
            if not ok:
                break
            if counts[i] < num_demos:
                ds.append(DemoTrajectory(i, ep_seed, states, obs, acts, True))
                counts[i] += 1
    log.info("collected %s in %d episodes", counts, episode)
    return ds


def replay_demo(env, traj: DemoTrajectory) -> bool:
    """Re-execute a stored segment and check it reproduces the stored states."""
    env.reset(traj.seed)
    env.set_state(env.decode_state(traj.states[0]))
    env.begin_section(traj.section)
    for a, expected in zip(traj.actions, traj.states[1:]):
        tr = env.step(a)
        if env.encode_state(tr.next_state) != expected:
            return False
    return env.task.section(traj.section).effect(env.state)


# ---------------------------------------------------------------------------
# behavioral cloning


@dataclass
class BCConfig:
    epochs: int = 300
    lr: float | None = None  # None: 0.05 for tabular, 1e-3 for MLP
    optimizer: str = "adam"
    batch_size: int | None = None  # None: full batch
    shuffle: bool = True
    std_start: float = 0.5
    std_end: float = 0.1
    hidden: tuple = (64, 64)
    seed: int = 0
    per_section: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        self.hidden = tuple(self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class BCResult:
    policy: object
    initial_loss: float
    final_loss: float
    losses: list = field(default_factory=list)


def new_policy(meta: dict, hidden=(64, 64), std=0.5, seed=0):
    """Fresh policy matching a dataset/environment description."""
    if meta["obs_kind"] == "index":
        return TabularPolicy(meta["n_obs"], meta["n_actions"])
    return GaussianMLPPolicy(meta["obs_dim"], meta["action_dim"], hidden, std=std, rng=seed)


def env_meta(env) -> dict:
    return {
        "obs_kind": "index" if env.discrete else "vector",
        "n_obs": int(getattr(env, "n_obs", 0)) if env.discrete else 0,
        "obs_dim": int(env.obs_dim),
        "n_actions": int(env.n_actions),
        "action_dim": int(env.action_dim),
        "num_sections": env.task.num_sections,
    }


def bc_loss(policy, obs, acts) -> float:
    return float(-np.mean(policy.log_prob(obs, acts)))


def bc_grad(policy, obs, acts):
    """Gradient of the mean negative log-likelihood."""
    n = len(acts)
    g = policy.grad_log_prob(obs, acts, np.full(n, -1.0 / n))
    return g


def _arrays(ds: DemoDataset, section=None):
    obs, acts, _ = ds.pairs(section)
    if ds.meta["obs_kind"] == "index":
        return np.asarray(obs, dtype=int), np.asarray(acts, dtype=int)
    return np.asarray(obs, dtype=float), np.asarray(acts, dtype=float)


def train_bc(dataset: DemoDataset, config: BCConfig | None = None):
    """Fit a policy by minimising mean negative log-likelihood on the demos.

    Returns a :class:`BCResult`.  Gaussian policies follow the linear std
    schedule from ``std_start`` to ``std_end`` over the epochs.  With
    ``per_section`` one policy per section is fitted and wrapped in
    :class:`SectionPolicies`.
    """
    config = config or BCConfig()
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if config.per_section:
        parts = {}
        for i in sorted(dataset.counts()):
            sub = DemoDataset(dataset.domain, dataset.meta)
            for t in dataset:
                if t.section == i:
                    sub.append(t)
            parts[i] = _fit(sub, config)
        pol = SectionPolicies({i: r.policy for i, r in parts.items()})
        init = float(np.mean([r.initial_loss for r in parts.values()]))
        final = float(np.mean([r.final_loss for r in parts.values()]))
        return BCResult(pol, init, final, [])
    return _fit(dataset, config)


def _fit(dataset, config):
    obs, acts = _arrays(dataset)
    if len(acts) == 0:
        raise EmptyDataset("dataset holds no state-action pairs")
    policy = new_policy(dataset.meta, config.hidden, config.std_start, config.seed)
    tabular = dataset.meta["obs_kind"] == "index"
    lr = config.lr if config.lr is not None else (0.05 if tabular else 1e-3)
    opt = make_optimizer(config.optimizer, policy.params, lr)
    sched = LinearSchedule(config.std_start, config.std_end, max(config.epochs - 1, 1))
    rng = np.random.default_rng(config.seed)
    n = len(acts)
    bs = n if not config.batch_size else min(config.batch_size, n)
    initial = bc_loss(policy, obs, acts)
    losses = []
    for epoch in range(config.epochs):
        if not tabular:
            policy.std = sched(epoch)
        if bs >= n:
            opt.step(bc_grad(policy, obs, acts))
        else:
            order = rng.permutation(n) if config.shuffle else np.arange(n)
            for k in range(0, n, bs):
                idx = order[k : k + bs]
                opt.step(bc_grad(policy, obs[idx], acts[idx]))
        losses.append(bc_loss(policy, obs, acts))
    if not tabular:
        policy.std = config.std_end if config.epochs else config.std_start
    final = bc_loss(policy, obs, acts)
    return BCResult(policy, initial, final, losses)


class SectionPolicies:
    """One independent policy per section, selected by the section tag.

    Only supports acting and likelihood queries; finetuning works on a
    single shared policy.
    """

    kind = "per_section"

    def __init__(self, policies: dict):
        self.policies = dict(policies)
        any_pol = next(iter(self.policies.values()))
        self.family = any_pol.family

    def act(self, obs, rng=None, mode="sample", section=None):
        return self.policies[section].act(obs, rng, mode)


# ---------------------------------------------------------------------------
# rollouts with a policy


def policy_agent(policy, rng=None, mode="mean"):
    """Adapt a policy to the ``agent(obs, section)`` signature of the executor."""

    if isinstance(policy, SectionPolicies):

        def _agent(obs, section):
            return policy.act(obs, rng, mode, section=section)

        return _agent

    def _agent(obs, section):
        return policy.act(obs, rng, mode)

    return _agent
