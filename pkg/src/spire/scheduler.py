"""Multi-worker planning/rollout scheduling.

Workers own an environment and run the planner up to the next handoff,
then announce ``(worker, section)`` on a FIFO status queue and wait.  A
single scheduler pops items, asks a sampling strategy whether to accept the
section, and either drives the worker step by step with the policy (policy
inference lives on the scheduler side) or tells it to reset.

Two interchangeable backends implement the worker side:

``ThreadedPool``
    one thread per worker, blocking queues, optional injected planning and
    step delays.  Used for throughput measurements.
``InlinePool``
    deterministic single-threaded simulation of the same protocol; the order
    in which pending workers finish planning is round-robin or drawn from a
    seeded RNG (fuzzing).  Used for learning runs and trace tests.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import planner as _planner
from .errors import ConfigError, SpireError

log = logging.getLogger(__name__)


class Phase(enum.Enum):
    PLANNING = "planning"
    AWAITING = "awaiting"
    INTERACTING = "interacting"
    RESETTING = "resetting"


@dataclass(frozen=True)
class StatusItem:
    worker: int
    section: int
    seq: int


class WorkerCrashed(SpireError):
    pass


class QueueClosed(SpireError):
    pass


# ---------------------------------------------------------------------------
# trace


class Trace:
    """Thread-safe in-memory event log, optionally mirrored to a JSON-lines file."""

    EVENTS = ("enqueue", "accept", "reject", "step", "success", "reset")

    def __init__(self, path=None, keep_steps=True):
        self.records = []
        self.keep_steps = keep_steps
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._t0 = time.perf_counter()

    def log(self, worker, event, **data):
        if event not in self.EVENTS:
            raise ValueError(f"unknown trace event {event!r}")
        if event == "step" and not self.keep_steps and self._fh is None:
            return
        rec = {"t": round(time.perf_counter() - self._t0, 6), "worker": worker, "event": event, **data}
        with self._lock:
            if event != "step" or self.keep_steps:
                self.records.append(rec)
            if self._fh:
                self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def count(self, event, worker=None):
        return sum(1 for r in self.records if r["event"] == event and (worker is None or r["worker"] == worker))

    def of(self, event):
        return [r for r in self.records if r["event"] == event]


def load_trace(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# worker (environment side, thread-confined)


def episode_seed(seed, worker, episode):
    return int(np.random.SeedSequence([int(seed), int(worker), int(episode)]).generate_state(1)[0])


class Worker:
    """Environment + planner owned by a single worker."""

    def __init__(self, wid, env, seed=0, plan_delay=0.0, step_delay=0.0, trace=None, sleep=time.sleep):
        self.wid = wid
        self.env = env
        self.seed = seed
        self.plan_delay = float(plan_delay)
        self.step_delay = float(step_delay)
        self.trace = trace
        self.sleep = sleep
        self.episode = 0
        self.phase = Phase.RESETTING
        self.section = None
        self.needs_reset = True
        self.planner_failures = 0

    def _log(self, event, **kw):
        if self.trace is not None:
            self.trace.log(self.wid, event, **kw)

    def reset(self):
        self.phase = Phase.RESETTING
        self.env.reset(episode_seed(self.seed, self.wid, self.episode))
        self.episode += 1
        self.needs_reset = False
        self.section = None
        self._log("reset", episode=self.episode - 1)

    def advance(self):
        """Plan from the current state up to the next handoff; returns its section.

        Resets first when needed, and starts a fresh episode after reaching
        the goal.  Planner errors propagate after scheduling a reset.
        """
        if self.needs_reset:
            self.reset()
        self.phase = Phase.PLANNING
        if self.plan_delay > 0:
            self.sleep(self.plan_delay)
        env = self.env
        for _ in range(1000):
            s = env.state
            if env.task.goal_set(s):
                self.reset()
                continue
            try:
                p = _planner.plan(s, env.task, env.model)
                s, learned = _planner.run_prefix(p, s, env.model)
            except SpireError:
                self.needs_reset = True
                self.planner_failures += 1
                raise
            env.set_state(s)
            if learned is None:
                continue
            env.begin_section(learned.section)
            self.section = learned.section
            self.phase = Phase.AWAITING
            return learned.section
        raise SpireError("planner made no progress")

    def observe(self):
        return self.env.observe()

    def step(self, action):
        self.phase = Phase.INTERACTING
        tr = self.env.step(action)
        if self.step_delay > 0:
            self.sleep(self.step_delay)
        next_obs = self.env.observe_state(tr.next_state, tr.section)
        if tr.done:
            self._log("success", section=tr.section, episode=self.episode - 1)
        elif tr.truncated:
            self.needs_reset = True
        return tr, next_obs

    def reject(self):
        self.needs_reset = True


# ---------------------------------------------------------------------------
# backends


class InlinePool:
    """Deterministic single-threaded realisation of the worker protocol.

    Workers waiting to plan are kept in a deque; ``pop`` lets one of them
    finish planning (the head, or a seeded random pick when ``fuzz`` is set)
    and enqueues its status item.
    """

    def __init__(self, env_factory, n_workers, seed=0, fuzz=None, trace=None, max_planner_failures=100):
        self.trace = trace
        self.workers = [Worker(i, env_factory(i), seed, trace=trace) for i in range(n_workers)]
        self.pending = deque(range(n_workers))
        self.status = deque()
        self.dead = set()
        self.fuzz = np.random.default_rng(fuzz) if fuzz is not None else None
        self.seq = 0
        self.max_planner_failures = max_planner_failures
        self.closed = False

    @property
    def n_workers(self):
        return len(self.workers)

    def _plan_one(self):
        while self.pending:
            if self.fuzz is not None:
                k = int(self.fuzz.integers(len(self.pending)))
                self.pending.rotate(-k)
            wid = self.pending.popleft()
            if wid in self.dead:
                continue
            w = self.workers[wid]
            try:
                j = w.advance()
            except SpireError as exc:
                log.warning("worker %d planner failure: %s", wid, exc)
                if w.planner_failures < self.max_planner_failures:
                    self.pending.append(wid)
                continue
            if self.trace is not None:
                self.trace.log(wid, "enqueue", section=j, seq=self.seq)
            self.status.append(StatusItem(wid, j, self.seq))
            self.seq += 1
            return True
        return False

    def pop(self, timeout=None):
        if not self.status and not self.closed:
            self._plan_one()
        if not self.status:
            return None
        return self.status.popleft()

    def _check(self, wid):
        if wid in self.dead:
            raise WorkerCrashed(f"worker {wid} is dead")

    def accept(self, wid):
        self._check(wid)

    def observe(self, wid):
        self._check(wid)
        return self.workers[wid].observe()

    def step(self, wid, action):
        self._check(wid)
        w = self.workers[wid]
        tr, nobs = w.step(action)
        if tr.done or tr.truncated:
            self.pending.append(wid)
        return tr, nobs

    def reject(self, wid):
        if wid in self.dead:
            return
        self.workers[wid].reject()
        self.pending.append(wid)

    def kill(self, wid):
        self.dead.add(wid)

    def close(self):
        self.closed = True


class _WorkerThread(threading.Thread):
    def __init__(self, worker: Worker, pool: "ThreadedPool"):
        super().__init__(daemon=True, name=f"spire-worker-{worker.wid}")
        self.worker = worker
        self.pool = pool
        self.cmd = queue.Queue(maxsize=1)
        self.reply = queue.Queue(maxsize=1)
        self.killed = threading.Event()

    def run(self):
        w, pool = self.worker, self.pool
        backoff = 0.01
        try:
            while not pool.stop.is_set():
                try:
                    j = w.advance()
                except SpireError as exc:
                    log.warning("worker %d planner failure: %s", w.wid, exc)
                    time.sleep(backoff)
                    backoff = min(backoff * 2, 1.0)
                    continue
                backoff = 0.01
                if not pool.enqueue(w.wid, j):
                    return
                cmd = self.cmd.get()
                if cmd[0] == "stop" or self.killed.is_set():
                    return
                if cmd[0] == "reject":
                    w.reject()
                    continue
                # accepted: serve observe/step requests until the section ends
                while True:
                    cmd = self.cmd.get()
                    if self.killed.is_set() or cmd[0] == "stop":
                        self.reply.put(("crashed",))
                        return
                    if cmd[0] == "observe":
                        self.reply.put(("obs", w.observe()))
                    elif cmd[0] == "step":
                        tr, nobs = w.step(cmd[1])
                        self.reply.put(("step", tr, nobs))
                        if tr.done or tr.truncated:
                            break
        except Exception as exc:  # crash isolation: never take the scheduler down
            log.error("worker %d crashed: %r", w.wid, exc)
            try:
                self.reply.put_nowait(("crashed",))
            except queue.Full:
                pass


class ThreadedPool:
    """One thread per worker; bounded multi-producer status queue (4 x workers)."""

    def __init__(self, env_factory, n_workers, seed=0, plan_delay=0.0, step_delay=0.0, trace=None):
        self.trace = trace
        self.status = queue.Queue(maxsize=4 * n_workers)
        self.stop = threading.Event()
        self._enqueue_lock = threading.Lock()
        self.seq = 0
        self.dead = set()
        self.threads = [
            _WorkerThread(Worker(i, env_factory(i), seed, plan_delay, step_delay, trace), self)
            for i in range(n_workers)
        ]
        for t in self.threads:
            t.start()

    @property
    def n_workers(self):
        return len(self.threads)

    @property
    def workers(self):
        return [t.worker for t in self.threads]

    def enqueue(self, wid, section):
        with self._enqueue_lock:
            if self.stop.is_set():
                return False
            item = StatusItem(wid, section, self.seq)
            self.seq += 1
            if self.trace is not None:
                self.trace.log(wid, "enqueue", section=section, seq=item.seq)
            self.status.put(item)
        return True

    def pop(self, timeout=0.5):
        try:
            return self.status.get(timeout=timeout)
        except queue.Empty:
            return None

    def _rpc(self, wid, msg, timeout=60.0):
        t = self.threads[wid]
        if wid in self.dead:
            raise WorkerCrashed(f"worker {wid} is dead")
        t.cmd.put(msg)
        try:
            out = t.reply.get(timeout=timeout)
        except queue.Empty:
            self.dead.add(wid)
            raise WorkerCrashed(f"worker {wid} stopped responding")
        if out[0] == "crashed":
            self.dead.add(wid)
            raise WorkerCrashed(f"worker {wid} crashed")
        return out

    def accept(self, wid):
        if wid in self.dead:
            raise WorkerCrashed(f"worker {wid} is dead")
        self.threads[wid].cmd.put(("accept",))

    def observe(self, wid):
        return self._rpc(wid, ("observe",))[1]

    def step(self, wid, action):
        _, tr, nobs = self._rpc(wid, ("step", action))
        return tr, nobs

    def reject(self, wid):
        if wid not in self.dead:
            self.threads[wid].cmd.put(("reject",))

    def kill(self, wid):
        self.threads[wid].killed.set()
        self.dead.add(wid)
        try:
            self.threads[wid].cmd.put_nowait(("stop",))
        except queue.Full:
            pass

    def close(self):
        """Stop workers and release any that are blocked on the status queue."""
        self.stop.set()
        deadline = time.monotonic() + 5.0
        while any(t.is_alive() for t in self.threads) and time.monotonic() < deadline:
            try:
                item = self.status.get_nowait()
            except queue.Empty:
                item = None
            for t in self.threads:
                try:
                    t.cmd.put_nowait(("stop",))
                except queue.Full:
                    pass
            if item is None:
                time.sleep(0.01)
        for t in self.threads:
            t.join(timeout=1.0)


# ---------------------------------------------------------------------------
# strategies


class Permissive:
    kind = "permissive"

    def accepts(self, section):
        return True

    def record(self, section, success):
        pass

    def rates(self):
        return {}


class Sequential:
    """Accept section ``j`` only once every earlier section's rolling success rate reaches ``threshold``."""

    kind = "sequential"

    def __init__(self, threshold=0.8, window=50, min_samples=10):
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if window < 1 or min_samples < 1:
            raise ConfigError("window and min_samples must be positive")
        self.threshold = threshold
        self.window = window
        self.min_samples = min(min_samples, window)
        self.history = {}

    def rate(self, section):
        h = self.history.get(section)
        if not h or len(h) < self.min_samples:
            return 0.0
        return sum(h) / len(h)

    def accepts(self, section):
        return all(self.rate(m) >= self.threshold for m in range(1, section))

    def record(self, section, success):
        self.history.setdefault(section, deque(maxlen=self.window)).append(bool(success))

    def rates(self):
        return {j: self.rate(j) for j in sorted(self.history)}


def make_strategy(kind="permissive", threshold=0.8, window=50, min_samples=10):
    if kind == "permissive":
        return Permissive()
    if kind == "sequential":
        return Sequential(threshold, window, min_samples)
    raise ConfigError(f"unknown strategy {kind!r}")


# ---------------------------------------------------------------------------
# policy handle


class PolicyHandle:
    """Scheduler-side inference on an immutable policy snapshot.

    ``swap`` replaces the snapshot atomically.  Action sampling uses one RNG
    stream per worker so that a worker's transitions depend only on its own
    history.
    """

    def __init__(self, policy, mode="sample", seed=0):
        self._policy = policy
        self.mode = mode
        self.seed = seed
        self._rngs = {}
        self._lock = threading.Lock()

    def swap(self, policy):
        with self._lock:
            self._policy = policy

    @property
    def policy(self):
        return self._policy

    def act(self, obs, worker=0, section=None):
        pol = self._policy
        if callable(pol) and not hasattr(pol, "act"):
            return pol(obs, section)
        rng = self._rngs.get(worker)
        if rng is None:
            rng = self._rngs[worker] = np.random.default_rng([self.seed, worker])
        if getattr(pol, "kind", "") == "per_section":
            return pol.act(obs, rng, self.mode, section=section)
        return pol.act(obs, rng, self.mode)


# ---------------------------------------------------------------------------
# scheduler


@dataclass
class StepRecord:
    worker: int
    obs: object
    transition: object
    next_obs: object


@dataclass
class SchedulerStats:
    popped: int = 0
    served: int = 0
    rejected: int = 0
    dropped: int = 0  # items of dead workers, counted among rejected
    frames: int = 0
    sections_done: int = 0
    section_counts: dict = field(default_factory=dict)
    served_counts: dict = field(default_factory=dict)
    successes: dict = field(default_factory=dict)
    crashed: set = field(default_factory=set)
    frame_times: list = field(default_factory=list)


class Scheduler:
    """Central scheduler loop (pop, accept or reject, drive to section end).

    ``on_step(record)`` receives every transition; it may return ``False``
    to stop the run.  With ``interleave`` the scheduler keeps several
    accepted workers active and advances them one step each in turn; this
    departs from strict one-at-a-time serving and is experimental.
    """

    def __init__(self, pool, policy, strategy=None, trace=None, interleave=False, record_times=False):
        self.pool = pool
        self.handle = policy if isinstance(policy, PolicyHandle) else PolicyHandle(policy)
        self.strategy = strategy or Permissive()
        self.trace = trace
        self.interleave = interleave
        self.record_times = record_times
        self.stats = SchedulerStats()
        self._stop = False

    def _log(self, worker, event, **kw):
        if self.trace is not None:
            self.trace.log(worker, event, **kw)

    def stop(self):
        self._stop = True

    def _decide(self, item):
        st = self.stats
        st.popped += 1
        st.section_counts[item.section] = st.section_counts.get(item.section, 0) + 1
        if item.worker in st.crashed:
            st.rejected += 1
            st.dropped += 1
            self._log(item.worker, "reject", section=item.section, seq=item.seq, reason="dead")
            return False
        if self.strategy.accepts(item.section):
            try:
                self.pool.accept(item.worker)
            except WorkerCrashed:
                st.crashed.add(item.worker)
                st.rejected += 1
                st.dropped += 1
                self._log(item.worker, "reject", section=item.section, seq=item.seq, reason="dead")
                return False
            st.served += 1
            st.served_counts[item.section] = st.served_counts.get(item.section, 0) + 1
            self._log(item.worker, "accept", section=item.section, seq=item.seq)
            return True
        st.rejected += 1
        self._log(item.worker, "reject", section=item.section, seq=item.seq)
        self.pool.reject(item.worker)
        return False

    def _one_step(self, item, on_step):
        """Advance an accepted worker by one step; returns True when its section ended."""
        wid = item.worker
        st = self.stats
        try:
            obs = self.pool.observe(wid)
            a = self.handle.act(obs, wid, item.section)
            tr, nobs = self.pool.step(wid, a)
        except WorkerCrashed as exc:
            log.warning("%s; dropping its episode", exc)
            st.crashed.add(wid)
            return True
        st.frames += 1
        if self.record_times:
            st.frame_times.append(time.perf_counter())
        self._log(wid, "step", section=tr.section, reward=tr.reward)
        if on_step is not None and on_step(StepRecord(wid, obs, tr, nobs)) is False:
            self._stop = True
        if tr.done or tr.truncated:
            self.strategy.record(item.section, tr.done)
            if tr.done:
                st.sections_done += 1
                st.successes[item.section] = st.successes.get(item.section, 0) + 1
            return True
        return False

    def run(self, max_frames=None, max_items=None, max_seconds=None, on_step=None, idle_timeout=0.5):
        t_end = None if max_seconds is None else time.monotonic() + max_seconds
        active = deque()

        def out_of_budget():
            if self._stop:
                return True
            if max_frames is not None and self.stats.frames >= max_frames:
                return True
            if t_end is not None and time.monotonic() >= t_end:
                return True
            return False

        while not out_of_budget():
            if self.interleave:
                if max_items is None or self.stats.popped < max_items:
                    item = self.pool.pop(0.0 if active else idle_timeout)
                    if item is not None and self._decide(item):
                        active.append(item)
                if not active:
                    if max_items is not None and self.stats.popped >= max_items:
                        break
                    continue
                item = active.popleft()
                if not self._one_step(item, on_step):
                    active.append(item)
                continue
            if max_items is not None and self.stats.popped >= max_items:
                break
            item = self.pool.pop(idle_timeout)
            if item is None:
                if isinstance(self.pool, InlinePool):
                    break  # nothing can ever arrive
                continue
            if not self._decide(item):
                continue
            while not self._one_step(item, on_step):
                if self._stop or out_of_budget():
                    break
        return self.stats


# ---------------------------------------------------------------------------
# throughput model


@dataclass
class ThroughputParams:
    T_plan: float
    t_step: float
    H_min: int
    n_workers: int = 1

    def __post_init__(self):
        if self.T_plan < 0 or self.t_step <= 0 or self.H_min < 1 or self.n_workers < 1:
            raise ConfigError("throughput parameters must be positive")

    @property
    def k(self):
        return self.T_plan / (self.t_step * self.H_min)


def predict_throughput(p: ThroughputParams) -> dict:
    k = p.k
    needed = max(math.ceil(k), 1)
    # A worker cannot plan while the agent steps it, so each one supplies at
    # most H frames per T + tH seconds: full rate really needs ceil(k) + 1.
    return {
        "k": k,
        "workers_needed": needed,
        "workers_needed_blocking": math.ceil(k) + 1,
        "multi_bound_applies": p.n_workers >= needed,
        "blocking_fps_upper_bound": min(1.0 / p.t_step, p.n_workers * p.H_min / (p.T_plan + p.t_step * p.H_min)),
        "multi_fps_lower_bound": 1.0 / p.t_step,
        "single_fps_upper_bound": p.H_min / (p.T_plan + p.t_step * p.H_min),
        "speedup": k + 1.0,
    }


def measure_throughput(
    n_workers, plan_delay, step_delay, H, seconds=10.0, warmup=None, seed=0, trace=None
) -> dict:
    """Run the threaded pipeline on a null task and report frames per second.

    Every section lasts exactly ``H`` steps (the task cannot be solved), so
    each worker alternates ``plan_delay`` of planning with ``H`` steps of
    interaction.  Frames are counted in a window that starts after
    ``warmup`` seconds (default: one planning delay).
    """
    from .envs import SyntheticChain

    warmup = plan_delay + 0.05 if warmup is None else warmup
    pool = ThreadedPool(
        lambda i: SyntheticChain((0.0,), step_limit=H),
        n_workers,
        seed=seed,
        plan_delay=plan_delay,
        step_delay=step_delay,
        trace=trace,
    )
    sched = Scheduler(pool, lambda obs, section: 0, Permissive(), trace=trace, record_times=True)
    t0 = time.perf_counter()
    try:
        sched.run(max_seconds=warmup + seconds)
    finally:
        pool.close()
    times = np.asarray(sched.stats.frame_times)
    lo, hi = t0 + warmup, t0 + warmup + seconds
    frames = int(np.sum((times >= lo) & (times < hi)))
    return {
        "n_workers": n_workers,
        "plan_delay": plan_delay,
        "step_delay": step_delay,
        "H": H,
        "seconds": seconds,
        "frames": frames,
        "fps": frames / seconds,
    }


def section_frequency_law(success_rates) -> np.ndarray:
    """Long-run fraction of status items per section under Permissive serving."""
    p = np.asarray(success_rates, dtype=float)
    w = np.concatenate([[1.0], np.cumprod(p[:-1])])
    return w / w.sum()


def make_pool(env_factory, n_workers, backend="inline", seed=0, plan_delay=0.0, step_delay=0.0, trace=None, fuzz=None):
    if backend == "inline":
        return InlinePool(env_factory, n_workers, seed=seed, fuzz=fuzz, trace=trace)
    if backend == "threads":
        return ThreadedPool(env_factory, n_workers, seed, plan_delay, step_delay, trace)
    raise ConfigError(f"unknown backend {backend!r}")

