"""Command line interface: ``spire <subcommand> [options]``.

Every subcommand takes ``--config FILE`` (JSON experiment config) plus
``--set key=value`` overrides and writes into ``--run-dir`` (default
``$SPIRE_RUNS/<subcommand>``).  Exit codes: 0 success, 1 check failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


from .errors import ConfigError, SpireError

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, dotted keys")
    p.add_argument("--run-dir", help="output directory")
    p.add_argument("--seed", type=int, help="seed (overrides the first config seed)")
    p.add_argument("--domain", help="domain name, e.g. GridChain-2")
    p.add_argument("-v", "--verbose", action="store_true")


def _sched_flags(p):
    p.add_argument("--workers", type=int, help="number of planner workers")
    p.add_argument("--strategy", choices=["permissive", "sequential"])
    p.add_argument("--seq-threshold", type=float, help="sequential strategy success threshold")
    p.add_argument("--plan-delay", type=float, help="injected planning sleep in seconds")


def build_parser():
    parser = argparse.ArgumentParser(prog="spire", description="planner-gated policy learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect planner-gated expert demonstrations")
    _common(p)
    p.add_argument("--num-demos", type=int)
    p.add_argument("--epsilon", type=float, help="expert action noise")

    p = sub.add_parser("train-bc", help="behavioral cloning on a demo file")
    _common(p)
    p.add_argument("--demos", help="demo file (default: <run-dir>/demos/demos.jsonl)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune", help="KL-regularised RL finetuning")
    _common(p)
    _sched_flags(p)
    p.add_argument("--bc", help="BC checkpoint to warmstart from")
    p.add_argument("--from-scratch", action="store_true", help="train without demonstrations")
    p.add_argument("--alpha", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--mode", choices=["init", "residual"])
    p.add_argument("--threads", action="store_true", help="use the threaded worker backend")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint, the expert or a random agent")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--policy", help="policy checkpoint")
    g.add_argument("--expert", action="store_true")
    g.add_argument("--random", action="store_true")
    p.add_argument("--rollouts", type=int)

    p = sub.add_parser("ablate", help="run an ablation suite")
    _common(p)
    p.add_argument("--suite", required=True, choices=["method", "kl", "strategy", "demos", "workers", "all"])
    p.add_argument("--keep-runs", action="store_true", help="keep per-seed run directories")

    p = sub.add_parser("throughput", help="predicted vs measured multi-worker throughput")
    _common(p)
    _sched_flags(p)
    p.add_argument("--step-delay", type=float, default=0.01)
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--seconds", type=float, default=10.0)

    p = sub.add_parser("verify", help="planner validity, discriminator oracle and invariant checks")
    _common(p)
    p.add_argument("--summary-dir", help="also cross-check summaries of an ablation output directory")

    p = sub.add_parser("dump-plan", help="print the symbolic plan from a reset state")
    _common(p)

    p = sub.add_parser("render-ascii", help="print a GridChain state")
    _common(p)
    p.add_argument("--handoff", action="store_true", help="render the state at the first handoff")
    return parser


# ---------------------------------------------------------------------------


def _config(args):
    from .harness import load_config

    overrides = list(args.set)
    if args.domain:
        overrides.append(f"domain={json.dumps(args.domain)}")
    for flag, key in (
        ("workers", "finetune.workers"),
        ("strategy", "finetune.strategy"),
        ("seq_threshold", "finetune.seq_threshold"),
        ("alpha", "finetune.alpha"),
        ("frames", "finetune.total_frames"),
        ("mode", "finetune.mode"),
        ("num_demos", "num_demos"),
        ("epsilon", "expert_epsilon"),
        ("epochs", "bc.epochs"),
        ("rollouts", "eval_rollouts"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{key}={json.dumps(v)}")
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.seeds = [args.seed] + [s for s in cfg.seeds if s != args.seed]
    return cfg


def _run_dir(args, name):
    from .harness import runs_root

    path = args.run_dir or os.path.join(runs_root(), name)
    os.makedirs(path, exist_ok=True)
    return path


def _seed(cfg):
    return cfg.seeds[0] if cfg.seeds else 0


def cmd_collect(args):
    from .harness import demos_for, prepare_run_dir

    cfg = _config(args)
    rd = prepare_run_dir(_run_dir(args, "collect"), cfg, {"command": "collect"})
    ds = demos_for(cfg, _seed(cfg), run_dir=rd)
    print(f"collected {ds.counts()} segments -> {os.path.join(rd, 'demos', 'demos.jsonl')}")
    print(f"checksum {ds.checksum}")
    return EXIT_OK


def cmd_train_bc(args):
    from .harness import prepare_run_dir
    from .imitation import BCConfig, DemoDataset, train_bc
    from .policies import save_policy

    cfg = _config(args)
    rd = prepare_run_dir(_run_dir(args, "train-bc"), cfg, {"command": "train-bc"})
    path = args.demos or os.path.join(rd, "demos", "demos.jsonl")
    if not os.path.exists(path):
        raise UsageError(f"demo file {path} not found; run `spire collect` first or pass --demos")
    ds = DemoDataset.load(path)
    res = train_bc(ds, BCConfig(**{**cfg.bc.to_dict(), "seed": _seed(cfg)}))
    out = os.path.join(rd, "checkpoints", "bc.json")
    save_policy(out, res.policy, {"initial_loss": res.initial_loss, "final_loss": res.final_loss, "domain": ds.domain})
    print(f"BC loss {res.initial_loss:.4f} -> {res.final_loss:.4f}; checkpoint {out}")
    return EXIT_OK


def cmd_finetune(args):
    from .finetune import FinetuneConfig, run_finetuning
    from .harness import evaluate_policy, make_domain, prepare_run_dir, write_rows, RESULT_COLUMNS
    from .imitation import env_meta, new_policy
    from .policies import load_policy, save_policy
    from .scheduler import Trace, make_pool

    if not args.bc and not args.from_scratch:
        raise UsageError("finetune needs --bc CHECKPOINT or --from-scratch")
    if args.bc and args.from_scratch:
        raise UsageError("--bc and --from-scratch are mutually exclusive")
    cfg = _config(args)
    seed = _seed(cfg)
    rd = prepare_run_dir(_run_dir(args, "finetune"), cfg, {"command": "finetune", "bc": args.bc})
    ft = FinetuneConfig(**{**cfg.finetune.to_dict(), "seed": seed})
    env = make_domain(cfg)
    eval_env = make_domain(cfg)
    if args.from_scratch:
        bc, scratch = None, new_policy(env_meta(env), cfg.bc.hidden, ft.std_start, seed)
    else:
        bc, _ = load_policy(args.bc)
        scratch = None
    trace = Trace(os.path.join(rd, "trace.log"), keep_steps=False)
    pool = None
    if args.threads or (args.plan_delay or 0) > 0:
        pool = make_pool(lambda i: make_domain(cfg), ft.workers, "threads", seed=seed, plan_delay=args.plan_delay or 0.0, trace=trace)
    try:
        res = run_finetuning(
            lambda i: make_domain(cfg),
            bc,
            ft,
            evaluator=lambda p: evaluate_policy(p, eval_env, ft.eval_rollouts, seed=1000 + seed),
            run_dir=rd,
            trace=trace,
            from_scratch_policy=scratch,
            pool=pool,
        )
    finally:
        if pool is not None:
            pool.close()
        trace.close()
    save_policy(os.path.join(rd, "checkpoints", "final.json"), res.final_policy, {"env_frames": res.stats.frames})
    rate, dur = evaluate_policy(res.policy, eval_env, cfg.eval_rollouts, seed=cfg.eval_seed + seed)
    row = dict(suite="finetune", domain=cfg.domain, method="RL" if args.from_scratch else "SPIRE", variant="",
               num_demos=0, seed=seed, success_rate=rate, mean_duration_steps=dur,
               env_frames=res.stats.frames, wall_seconds=res.curve[-1]["wall_seconds"])
    write_rows(os.path.join(rd, "eval.csv"), RESULT_COLUMNS, [row])
    print(f"best checkpoint at {res.best_frames} frames; eval success {rate:.3f}, duration {dur:.2f} steps")
    if res.error:
        print(f"run ended early: {res.error}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_evaluate(args):
    from .envs import ScriptedExpert
    from .harness import RandomAgent, evaluate_policy, make_domain, prepare_run_dir, write_rows, RESULT_COLUMNS
    from .policies import load_policy

    cfg = _config(args)
    seed = _seed(cfg)
    rd = prepare_run_dir(_run_dir(args, "evaluate"), cfg, {"command": "evaluate"})
    env = make_domain(cfg)
    if args.expert:
        pol, name = ScriptedExpert(env, 0.0), "expert"
    elif args.random:
        pol, name = RandomAgent(env, seed), "random"
    else:
        pol, name = load_policy(args.policy)[0], os.path.basename(args.policy)
    rate, dur = evaluate_policy(pol, env, cfg.eval_rollouts, seed=cfg.eval_seed + seed)
    row = dict(suite="evaluate", domain=cfg.domain, method=name, variant="", num_demos=0, seed=seed,
               success_rate=rate, mean_duration_steps=dur, env_frames=0, wall_seconds=0.0)
    write_rows(os.path.join(rd, "eval.csv"), RESULT_COLUMNS, [row])
    print(f"{name} on {cfg.domain}: success {rate:.3f} over {cfg.eval_rollouts} rollouts, "
          f"mean successful duration {dur:.2f} agent steps")
    return EXIT_OK


def cmd_ablate(args):
    from .harness import SUITES, prepare_run_dir, run_ablation_suite

    cfg = _config(args)
    rd = prepare_run_dir(_run_dir(args, "ablate"), cfg, {"command": "ablate", "suite": args.suite})
    suites = SUITES if args.suite == "all" else (args.suite,)
    for s in suites:
        run_ablation_suite(cfg, s, rd, keep_runs=args.keep_runs)
        print(f"suite {s}: wrote {os.path.join(rd, s + ('.csv' if s == 'workers' else '_summary.csv'))}")
    return EXIT_OK


def cmd_throughput(args):
    from .scheduler import ThroughputParams, measure_throughput, predict_throughput

    n = args.workers or 1
    T = 2.0 if args.plan_delay is None else args.plan_delay
    pred = predict_throughput(ThroughputParams(T, args.step_delay, args.horizon, n))
    m = measure_throughput(n, T, args.step_delay, args.horizon, seconds=args.seconds)
    print(f"k = {pred['k']:.3f}; workers needed for the 1/t bound: {pred['workers_needed']} "
          f"({pred['workers_needed_blocking']} when workers block while stepped)")
    print(f"predicted single-worker FPS <= {pred['single_fps_upper_bound']:.2f}")
    print(f"predicted multi-worker FPS  >= {pred['multi_fps_lower_bound']:.2f} "
          f"({'applies' if pred['multi_bound_applies'] else 'needs more workers'})")
    print(f"predicted FPS with {n} blocking worker(s) <= {pred['blocking_fps_upper_bound']:.2f}")
    print(f"predicted speedup {pred['speedup']:.2f}")
    print(f"measured FPS with {n} worker(s): {m['fps']:.2f}")
    return EXIT_OK


def run_verify(summary_dir=None, out=print) -> bool:
    """Run the verification battery; returns True when everything passes."""
    from . import verify

    ok = True
    for name, passed, detail in verify.run_all(summary_dir):
        out(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        ok &= passed
    return ok


def cmd_verify(args):
    return EXIT_OK if run_verify(args.summary_dir) else EXIT_CHECK


def cmd_dump_plan(args):
    from .harness import make_domain
    from .planner import plan, run_prefix

    cfg = _config(args)
    env = make_domain(cfg)
    s = env.reset(_seed(cfg))
    while True:
        p = plan(s, env.task, env.model)
        print(p.pretty() if p else "(goal reached: empty plan)")
        s2, learned = run_prefix(p, s, env.model)
        if learned is None:
            break
        # assume the handoff succeeds: jump to a witness of its effect set via the expert
        env.set_state(s2)
        env.begin_section(learned.section)
        while env.active_section is not None:
            env.step(env.expert_action(env.state, learned.section))
        if not env.task.section(learned.section).effect(env.state):
            break
        s = env.state
        print(f"-- after section {learned.section}, replanning --")
    return EXIT_OK


def cmd_render_ascii(args):
    from .envs import GridChain
    from .harness import make_domain
    from .planner import plan, run_prefix

    cfg = _config(args)
    env = make_domain(cfg)
    if not isinstance(env, GridChain):
        raise UsageError("render-ascii supports GridChain domains only")
    s = env.reset(_seed(cfg))
    if args.handoff:
        s, _ = run_prefix(plan(s, env.task, env.model), s, env.model)
    print(env.render_ascii(s))
    return EXIT_OK


COMMANDS = {
    "collect": cmd_collect,
    "train-bc": cmd_train_bc,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "throughput": cmd_throughput,
    "verify": cmd_verify,
    "dump-plan": cmd_dump_plan,
    "render-ascii": cmd_render_ascii,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"spire {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SpireError as exc:
        print(f"spire {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
