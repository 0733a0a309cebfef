"""Evaluation protocol, experiment runner and ablation suites.

Run directory layout (one per seed run)::

    config.echo     JSON echo of the full configuration
    demos/          demos.jsonl
    checkpoints/    bc.json, best.json, frames_*.json
    curves.csv      env_frames, wall_seconds, eval_success_rate, mean_kl, actor_loss, critic_loss
    eval.csv        RESULT_COLUMNS
    trace.log       scheduler trace, one JSON record per line

The root directory for runs is ``$SPIRE_RUNS`` (default ``./runs``).
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import planner as _planner
from .envs import ScriptedExpert, make_env
from .errors import ConfigError, SpireError
from .finetune import FinetuneConfig, run_finetuning
from .imitation import BCConfig, DemoDataset, collect_demos, env_meta, new_policy, policy_agent, train_bc
from .policies import save_policy
from .scheduler import Trace, measure_throughput, predict_throughput, ThroughputParams

METHODS = ("BC", "RL", "SPIRE", "SPIRE-noKL")
SUITES = ("method", "kl", "strategy", "demos", "workers")

RESULT_COLUMNS = (
    "suite",
    "domain",
    "method",
    "variant",
    "num_demos",
    "seed",
    "success_rate",
    "mean_duration_steps",
    "env_frames",
    "wall_seconds",
)
SUMMARY_COLUMNS = (
    "suite",
    "domain",
    "method",
    "variant",
    "num_demos",
    "n_seeds",
    "mean_success",
    "std_success",
    "top1_seed",
    "top1_success",
    "top1_duration_steps",
)
MIN_DEMOS_COLUMNS = ("domain", "method", "threshold", "min_demos")
WORKER_COLUMNS = ("n_workers", "plan_delay", "step_delay", "H", "measured_fps", "predicted_single_fps", "predicted_multi_fps")


def runs_root():
    return os.environ.get("SPIRE_RUNS", os.path.join(os.getcwd(), "runs"))


# ---------------------------------------------------------------------------
# evaluation


def rollout_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), 7919, int(k)]).generate_state(1)[0])


class RandomAgent:
    """Uniformly random actions; a sanity baseline."""

    def __init__(self, env, seed=0):
        self.env = env
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs, section):
        if self.env.discrete:
            return int(self.rng.integers(self.env.n_actions))
        return self.rng.uniform(-1, 1, size=self.env.action_dim)


def _agent_for(policy, env, mode, rng):
    if isinstance(policy, ScriptedExpert):
        return policy.agent(env)
    if callable(policy) and not hasattr(policy, "act"):
        return policy
    return policy_agent(policy, rng, mode)


def evaluate_rollouts(policy, env, n_rollouts=50, seed=0, mode="mean"):
    """Per-rollout results of the full planner loop."""
    rng = np.random.default_rng([int(seed), 104729])
    agent = _agent_for(policy, env, mode, rng)
    out = []
    for k in range(n_rollouts):
        env.reset(rollout_seed(seed, k))
        try:
            out.append(_planner.run_spire(env, agent))
        except SpireError as exc:
            out.append(_planner.RolloutResult(False, reason=str(exc)))
    return out


def evaluate_policy(policy, env, n_rollouts=50, seed=0, mode="mean"):
    """Success rate and mean agent-step duration over successful rollouts.

    The duration is ``nan`` when nothing succeeds.  Planner failures count as
    failed rollouts.  Policies act greedily by default (``mode="mean"``).
    """
    results = evaluate_rollouts(policy, env, n_rollouts, seed, mode)
    wins = [r.agent_steps for r in results if r.success]
    rate = len(wins) / n_rollouts if n_rollouts else 0.0
    return rate, (float(np.mean(wins)) if wins else math.nan)


# ---------------------------------------------------------------------------
# configuration


def _strict(cls, data, where):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(sorted(unknown))}")
    return cls(**data)


@dataclass
class ExperimentConfig:
    domain: str = "GridChain-2"
    domain_params: dict = field(default_factory=dict)
    method: str = "SPIRE"
    num_demos: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    expert_epsilon: float = 0.1
    eval_rollouts: int = 50
    eval_seed: int = 10_000
    success_threshold: float = 0.8
    demo_budgets: list = field(default_factory=lambda: [1, 5, 10, 50])
    worker_counts: list = field(default_factory=lambda: [1, 2, 4])
    throughput_plan_delay: float = 0.5
    throughput_step_delay: float = 0.01
    throughput_horizon: int = 50
    throughput_seconds: float = 10.0
    bc: BCConfig = field(default_factory=BCConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if isinstance(self.bc, dict):
            self.bc = _strict(BCConfig, self.bc, "bc")
        if isinstance(self.finetune, dict):
            self.finetune = _strict(FinetuneConfig, self.finetune, "finetune")
        if self.num_demos < 0 or self.eval_rollouts < 1:
            raise ConfigError("num_demos must be >= 0 and eval_rollouts >= 1")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _strict(cls, dict(data), "experiment")

    def to_dict(self):
        d = asdict(self)
        d["bc"] = self.bc.to_dict()
        d["finetune"] = self.finetune.to_dict()
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if k in ("bc", "finetune"):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return ExperimentConfig.from_dict(d)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key=value`` overrides (dotted keys, JSON values) to a config dict."""
    out = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside {key!r}")
        node[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


# ---------------------------------------------------------------------------
# single runs


@dataclass
class ResultRecord:
    suite: str
    domain: str
    method: str
    variant: str
    num_demos: int
    seed: int
    success_rate: float
    mean_duration_steps: float
    env_frames: int = 0
    wall_seconds: float = 0.0
    curve_path: str = ""
    policy: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success rate must lie in [0, 1]")

    def row(self):
        return {k: getattr(self, k) for k in RESULT_COLUMNS}


def make_domain(cfg: ExperimentConfig):
    return make_env(cfg.domain, **cfg.domain_params)


def prepare_run_dir(path, cfg: ExperimentConfig | None = None, extra=None):
    os.makedirs(os.path.join(path, "demos"), exist_ok=True)
    os.makedirs(os.path.join(path, "checkpoints"), exist_ok=True)
    if cfg is not None:
        echo = {"config": cfg.to_dict(), **(extra or {})}
        with open(os.path.join(path, "config.echo"), "w", encoding="utf-8") as fh:
            json.dump(echo, fh, indent=2, sort_keys=True)
    return path


def demos_for(cfg: ExperimentConfig, seed: int, num_demos=None, run_dir=None) -> DemoDataset:
    env = make_domain(cfg)
    n = cfg.num_demos if num_demos is None else num_demos
    ds = collect_demos(env, ScriptedExpert(env, cfg.expert_epsilon, seed=seed), n, seed=seed)
    if run_dir:
        ds.save(os.path.join(run_dir, "demos", "demos.jsonl"))
    return ds


def run_seed(cfg: ExperimentConfig, seed: int, suite="single", variant="", run_dir=None, demos=None) -> ResultRecord:
    """Train and evaluate one seed of ``cfg.method``."""
    t0 = time.perf_counter()
    if run_dir:
        prepare_run_dir(run_dir, cfg, {"seed": seed, "suite": suite, "variant": variant})
    env = make_domain(cfg)
    eval_env = make_domain(cfg)
    method = cfg.method
    num_demos = 0 if method == "RL" else cfg.num_demos
    frames = 0
    curve_path = ""
    bc_cfg = BCConfig(**{**cfg.bc.to_dict(), "seed": seed})
    if method == "RL":
        policy = new_policy(env_meta(env), cfg.bc.hidden, cfg.finetune.std_start, seed)
        bc = None
    else:
        ds = demos if demos is not None else demos_for(cfg, seed, run_dir=run_dir)
        bc = train_bc(ds, bc_cfg).policy
        if run_dir:
            save_policy(os.path.join(run_dir, "checkpoints", "bc.json"), bc, {"seed": seed})
        policy = bc
    if method != "BC":
        ft = cfg.finetune.to_dict()
        ft["seed"] = seed
        if method == "SPIRE-noKL":
            ft["alpha"] = 0.0
            ft["adaptive_alpha"] = False
        ft_cfg = FinetuneConfig(**ft)
        roll_seed = 1000 + seed

        def evaluator(p):
            return evaluate_policy(p, eval_env, ft_cfg.eval_rollouts, seed=roll_seed)

        trace = Trace(os.path.join(run_dir, "trace.log"), keep_steps=False) if run_dir else None
        try:
            res = run_finetuning(
                lambda i: make_domain(cfg),
                bc,
                ft_cfg,
                evaluator=evaluator,
                run_dir=run_dir,
                trace=trace,
                from_scratch_policy=policy if method == "RL" else None,
            )
        finally:
            if trace is not None:
                trace.close()
        policy = res.policy
        frames = res.stats.frames if res.stats else 0
        if run_dir:
            curve_path = os.path.join(run_dir, "curves.csv")
    rate, dur = evaluate_policy(policy, eval_env, cfg.eval_rollouts, seed=cfg.eval_seed + seed)
    rec = ResultRecord(
        suite, cfg.domain, method, variant, num_demos, seed, rate, dur, frames,
        round(time.perf_counter() - t0, 3), curve_path, policy,
    )
    if run_dir:
        write_rows(os.path.join(run_dir, "eval.csv"), RESULT_COLUMNS, [rec.row()])
    return rec


def run_experiment(cfg: ExperimentConfig, run_dir=None, suite="single", variant=""):
    """All seeds of ``cfg``; each seed writes into ``run_dir/seed_<n>``."""
    out = []
    for seed in cfg.seeds:
        sub = os.path.join(run_dir, f"seed_{seed}") if run_dir else None
        out.append(run_seed(cfg, seed, suite, variant, sub))
    return out


# ---------------------------------------------------------------------------
# reporting


def _sort_key(rec):
    dur = rec.mean_duration_steps
    return (rec.success_rate, -dur if dur == dur else -math.inf)


def top1(records):
    """Best seed by success rate, ties broken by shorter successful duration."""
    if not records:
        raise ValueError("no records")
    best = records[0]
    for r in records[1:]:
        if _sort_key(r) > _sort_key(best):
            best = r
    return best


def summarize(records):
    groups = {}
    for r in records:
        groups.setdefault((r.suite, r.domain, r.method, r.variant, r.num_demos), []).append(r)
    rows = []
    for key, recs in groups.items():
        succ = np.array([r.success_rate for r in recs])
        best = top1(recs)
        rows.append(
            dict(
                zip(SUMMARY_COLUMNS, key + (
                    len(recs),
                    float(succ.mean()),
                    float(succ.std(ddof=1)) if len(recs) > 1 else 0.0,
                    best.seed,
                    best.success_rate,
                    best.mean_duration_steps,
                ))
            )
        )
    return rows


def min_demos(records, threshold=0.8):
    """Per (domain, method): smallest budget whose top-1 success reaches ``threshold``.

    ``None`` when no budget reaches it.
    """
    by = {}
    for r in records:
        by.setdefault((r.domain, r.method), {}).setdefault(r.num_demos, []).append(r)
    out = {}
    for key, budgets in by.items():
        ok = [n for n, recs in sorted(budgets.items()) if top1(recs).success_rate >= threshold]
        out[key] = ok[0] if ok else None
    return out


def write_rows(path, columns, rows, append=False):
    exists = append and os.path.exists(path)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        if not exists:
            w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})
        fh.flush()


def read_records(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                ResultRecord(
                    row["suite"], row["domain"], row["method"], row["variant"], int(row["num_demos"]),
                    int(row["seed"]), float(row["success_rate"]), float(row["mean_duration_steps"]),
                    int(row["env_frames"]), float(row["wall_seconds"]),
                )
            )
    return out


def check_summary(per_seed_csv, summary_csv, tol=1e-9) -> bool:
    """Recompute the summary from per-seed rows and compare with the stored one."""
    fresh = {tuple(str(r[k]) for k in SUMMARY_COLUMNS[:5]): r for r in summarize(read_records(per_seed_csv))}
    with open(summary_csv, newline="", encoding="utf-8") as fh:
        stored = list(csv.DictReader(fh))
    if len(stored) != len(fresh):
        return False
    for row in stored:
        ref = fresh.get(tuple(row[k] for k in SUMMARY_COLUMNS[:5]))
        if ref is None:
            return False
        for k in ("mean_success", "std_success", "top1_success"):
            if abs(float(row[k]) - ref[k]) > tol:
                return False
        if int(row["top1_seed"]) != ref["top1_seed"]:
            return False
    return True


# ---------------------------------------------------------------------------
# ablation suites


def _suite_runs(suite, cfg):
    """(config, variant) pairs making up a suite."""
    if suite == "method":
        return [(cfg.replace(method=m), m) for m in ("BC", "RL", "SPIRE")]
    if suite == "kl":
        return [
            (cfg.replace(method="SPIRE"), f"alpha={cfg.finetune.alpha:g}"),
            (cfg.replace(method="SPIRE-noKL"), "alpha=0"),
        ]
    if suite == "strategy":
        return [
            (cfg.replace(method="SPIRE", finetune={"strategy": s}), s) for s in ("permissive", "sequential")
        ]
    if suite == "demos":
        return [
            (cfg.replace(method=m, num_demos=n), f"demos={n}") for n in cfg.demo_budgets for m in ("BC", "SPIRE")
        ]
    raise ConfigError(f"unknown suite {suite!r}; known: {', '.join(SUITES)}")


def run_ablation_suite(cfg: ExperimentConfig, suite: str, out_dir, keep_runs=False):
    """Run one suite; writes ``<suite>.csv`` (per seed) and ``<suite>_summary.csv``.

    Per-seed rows are appended as soon as each seed finishes, so an
    interrupted suite keeps every completed row.  Returns the records (or
    throughput rows for the ``workers`` suite).
    """
    os.makedirs(out_dir, exist_ok=True)
    if suite == "workers":
        return run_worker_sweep(cfg, out_dir)
    per_seed = os.path.join(out_dir, f"{suite}.csv")
    if os.path.exists(per_seed):
        os.remove(per_seed)
    records = []
    demo_cache = {}
    for run_cfg, variant in _suite_runs(suite, cfg):
        for seed in run_cfg.seeds:
            sub = os.path.join(out_dir, "runs", f"{run_cfg.method}_{variant}_seed{seed}") if keep_runs else None
            demos = None
            if run_cfg.method != "RL":
                key = (seed, run_cfg.num_demos)
                if key not in demo_cache:
                    demo_cache[key] = demos_for(run_cfg, seed)
                demos = demo_cache[key]
            rec = run_seed(run_cfg, seed, suite, variant, sub, demos=demos)
            records.append(rec)
            write_rows(per_seed, RESULT_COLUMNS, [rec.row()], append=True)
    write_rows(os.path.join(out_dir, f"{suite}_summary.csv"), SUMMARY_COLUMNS, summarize(records))
    if suite == "demos":
        md = min_demos(records, cfg.success_threshold)
        rows = [
            {"domain": d, "method": m, "threshold": cfg.success_threshold, "min_demos": "" if n is None else n}
            for (d, m), n in sorted(md.items())
        ]
        write_rows(os.path.join(out_dir, "demos_min.csv"), MIN_DEMOS_COLUMNS, rows)
    return records


def run_worker_sweep(cfg: ExperimentConfig, out_dir):
    rows = []
    T, t, H = cfg.throughput_plan_delay, cfg.throughput_step_delay, cfg.throughput_horizon
    for n in cfg.worker_counts:
        m = measure_throughput(n, T, t, H, seconds=cfg.throughput_seconds)
        pred = predict_throughput(ThroughputParams(T, t, H, n))
        rows.append(
            {
                "n_workers": n,
                "plan_delay": T,
                "step_delay": t,
                "H": H,
                "measured_fps": round(m["fps"], 3),
                "predicted_single_fps": round(pred["single_fps_upper_bound"], 3),
                "predicted_multi_fps": round(pred["blocking_fps_upper_bound"], 3),
            }
        )
    write_rows(os.path.join(out_dir, "workers.csv"), WORKER_COLUMNS, rows)
    return rows
