import logging

import numpy as np
import pytest

from spire.envs import GridChain, SyntheticChain
from spire.errors import ConfigError
from spire.policies import TabularPolicy
from spire.scheduler import (
    InlinePool,
    Permissive,
    PolicyHandle,
    Scheduler,
    Sequential,
    ThreadedPool,
    ThroughputParams,
    Trace,
    load_trace,
    make_pool,
    make_strategy,
    measure_throughput,
    predict_throughput,
    section_frequency_law,
)
from spire.verify import fifo_conservation, section_frequency


def _oracle_for(pool):
    def agent(obs, section):
        env = pool.workers[0].env
        return env.expert_action(env.state, section)

    return agent


def test_single_worker_oracle_alternates_sections():
    trace = Trace()
    pool = InlinePool(lambda i: GridChain(k=2), 1, seed=0, trace=trace)
    Scheduler(pool, _oracle_for(pool), trace=trace).run(max_items=12)
    assert [r["section"] for r in trace.of("enqueue")] == [1, 2] * 6
    assert trace.count("success") == 12


def test_reject_restarts_at_section_one():
    trace = Trace()
    pool = InlinePool(lambda i: GridChain(k=2), 1, seed=0, trace=trace)
    gate = Sequential(threshold=1.0, window=50, min_samples=50)  # section 2 never admitted
    st = Scheduler(pool, _oracle_for(pool), gate, trace=trace).run(max_items=20)
    assert st.served_counts.get(2, 0) == 0 and st.rejected == 10
    events = [(r["event"], r.get("section")) for r in trace.records if r["event"] in ("enqueue", "reject", "reset")]
    for k, ev in enumerate(events):
        if ev[0] == "reject" and k + 2 < len(events):
            assert events[k + 1][0] == "reset"
            assert events[k + 2] == ("enqueue", 1)


def _failing_env(i):
    env = GridChain(k=2)
    env.model.search = lambda *a, **kw: None
    return env


def test_always_failing_planner_keeps_scheduler_live(caplog):
    caplog.set_level(logging.WARNING)
    pool = InlinePool(_failing_env, 2, max_planner_failures=5)
    st = Scheduler(pool, lambda o, s: 0).run(max_items=10)
    assert st.popped == 0
    assert any("planner failure" in r.message for r in caplog.records)


def test_failing_worker_does_not_block_healthy_ones():
    pool = InlinePool(lambda i: _failing_env(i) if i == 0 else SyntheticChain((0.5, 0.5)), 3, max_planner_failures=3)
    st = Scheduler(pool, lambda o, s: 0).run(max_items=100)
    assert st.popped == 100 and st.served == 100


def test_threaded_failing_planner_is_live():
    pool = ThreadedPool(_failing_env, 2)
    try:
        st = Scheduler(pool, lambda o, s: 0).run(max_seconds=0.3, idle_timeout=0.05)
    finally:
        pool.close()
    assert st.popped == 0


def test_permissive_serves_everything():
    pool = InlinePool(lambda i: SyntheticChain((0.7, 0.4)), 4, seed=1)
    st = Scheduler(pool, lambda o, s: 0, Permissive()).run(max_items=500)
    assert st.served == st.popped == 500 and st.rejected == 0


def test_sequential_blocks_section_two_below_threshold():
    pool = InlinePool(lambda i: SyntheticChain((0.5, 1.0)), 4, seed=2)
    gate = Sequential(threshold=0.9, window=50, min_samples=10)
    st = Scheduler(pool, lambda o, s: 0, gate).run(max_items=2000)
    assert st.served_counts.get(2, 0) == 0 and st.section_counts[2] > 100
    assert gate.rates()[1] == pytest.approx(0.5, abs=0.2)


def test_sequential_admits_after_threshold_and_stays_monotone():
    gate = Sequential(threshold=0.8, window=10, min_samples=5)
    assert not gate.accepts(2)
    for _ in range(5):
        gate.record(1, True)
    assert gate.accepts(2) and not gate.accepts(3)
    for _ in range(3):
        gate.record(1, True)
        assert gate.accepts(2)
    assert gate.accepts(1)


def test_strategy_factory_and_validation():
    assert make_strategy("permissive").kind == "permissive"
    assert make_strategy("sequential", 0.5).threshold == 0.5
    with pytest.raises(ConfigError):
        make_strategy("greedy")
    with pytest.raises(ConfigError):
        Sequential(threshold=1.5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fuzzed_conservation(seed):
    ok, st = fifo_conservation(8, 200, seed=seed)
    assert ok and st.popped == 1600


def test_interleaved_serving_conserves_items():
    trace = Trace()
    pool = InlinePool(lambda i: SyntheticChain((0.6, 0.6), step_limit=3), 4, seed=0, fuzz=1, trace=trace)
    st = Scheduler(pool, lambda o, s: 0, trace=trace, interleave=True).run(max_items=300)
    assert st.served + st.rejected == st.popped


def _per_worker_steps(kill_at=None, victim=2):
    pool = InlinePool(lambda i: GridChain(k=2), 4, seed=5)
    handle = PolicyHandle(TabularPolicy(GridChain(k=2).n_obs, 5), mode="sample", seed=7)
    out = {w: [] for w in range(4)}
    sched = Scheduler(pool, handle)

    def on_step(rec):
        out[rec.worker].append((rec.obs, int(rec.transition.action), rec.transition.reward))
        if kill_at is not None and sched.stats.frames == kill_at:
            pool.kill(victim)

    sched.run(max_frames=3000, on_step=on_step)
    return out, sched.stats


def test_crash_isolation_inline():
    base, _ = _per_worker_steps()
    # sections run the full 100 steps, so worker 2 owns frames 200..299
    cut, st = _per_worker_steps(kill_at=250)
    assert 2 in st.crashed
    for w in (0, 1, 3):
        n = min(len(base[w]), len(cut[w]))
        assert n > 100 and base[w][:n] == cut[w][:n]
    assert len(cut[2]) == 50 and cut[2] == base[2][:50]


def test_crash_isolation_threaded():
    pool = ThreadedPool(lambda i: SyntheticChain((0.3,), step_limit=5), 3)
    seen = set()
    sched = Scheduler(pool, lambda o, s: 0)

    def on_step(rec):
        seen.add(rec.worker)
        if sched.stats.frames == 20:
            pool.kill(0)

    try:
        st = sched.run(max_frames=400, on_step=on_step)
    finally:
        pool.close()
    assert st.frames == 400 and {1, 2} <= seen


def test_no_starvation_under_permissive():
    trace = Trace()
    pool = InlinePool(lambda i: SyntheticChain((0.5, 0.5)), 5, seed=0, fuzz=3, trace=trace)
    Scheduler(pool, lambda o, s: 0, trace=trace).run(max_items=2000)
    served = [r["worker"] for r in trace.of("accept")]
    counts = np.bincount(served, minlength=5)
    assert counts.min() > 200
    last = {}
    worst = 0
    for k, w in enumerate(served):
        if w in last:
            worst = max(worst, k - last[w])
        last[w] = k
    assert worst < 100


def test_threaded_queue_bounded_and_trace_file(tmp_path):
    path = tmp_path / "trace.log"
    trace = Trace(str(path))
    pool = make_pool(lambda i: SyntheticChain((0.5, 0.5)), 3, backend="threads", trace=trace)
    assert pool.status.maxsize == 12
    try:
        Scheduler(pool, lambda o, s: 0, trace=trace).run(max_items=50)
    finally:
        pool.close()
        trace.close()
    recs = load_trace(path)
    assert {"t", "worker", "event"} <= set(recs[0])
    assert {r["event"] for r in recs} <= set(Trace.EVENTS)
    enq = [r["seq"] for r in recs if r["event"] == "enqueue"]
    dec = [r["seq"] for r in recs if r["event"] in ("accept", "reject")]
    assert dec == enq[: len(dec)]


def test_policy_handle_swap_and_per_worker_streams():
    pol = TabularPolicy(1, 4)
    h = PolicyHandle(pol, seed=3)
    a = [h.act(0, worker=0) for _ in range(20)]
    h2 = PolicyHandle(pol, seed=3)
    for _ in range(7):
        h2.act(0, worker=1)  # another worker's draws do not shift worker 0
    assert a == [h2.act(0, worker=0) for _ in range(20)]
    h.swap(TabularPolicy(1, 4, np.array([[0, 0, 50.0, 0]])))
    assert h.act(0, worker=0) == 2


def test_section_frequency_law_closed_form():
    assert np.allclose(section_frequency_law([0.9, 0.5]), [1 / 1.9, 0.9 / 1.9])
    assert np.allclose(section_frequency_law([1.0, 1.0, 1.0]), [1 / 3] * 3)
    gap, _, _ = section_frequency((0.8, 0.5, 0.9), items=6000)
    assert gap < 0.02


def test_predict_throughput_examples():
    p = predict_throughput(ThroughputParams(T_plan=20, t_step=0.05, H_min=100, n_workers=4))
    assert p["k"] == pytest.approx(4)
    assert p["single_fps_upper_bound"] == pytest.approx(4)
    assert p["multi_fps_lower_bound"] == pytest.approx(20)
    assert p["speedup"] == pytest.approx(5)
    assert p["multi_bound_applies"]
    assert not predict_throughput(ThroughputParams(20, 0.05, 100, 3))["multi_bound_applies"]
    assert predict_throughput(ThroughputParams(0, 0.05, 100))["speedup"] == 1
    assert predict_throughput(ThroughputParams(5.0, 0.05, 100))["speedup"] == pytest.approx(2)
    with pytest.raises(ConfigError):
        ThroughputParams(1, 0, 10)


def test_single_worker_throughput_respects_bound():
    m = measure_throughput(1, plan_delay=0.25, step_delay=0.01, H=25, seconds=2.0)
    bound = predict_throughput(ThroughputParams(0.25, 0.01, 25))["single_fps_upper_bound"]
    assert 0.6 * bound <= m["fps"] <= 1.1 * bound
