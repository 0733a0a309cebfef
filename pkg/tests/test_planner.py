import dataclasses
from collections import deque

import numpy as np
import pytest

from spire.envs import GridChain, PointChain, ScriptedExpert
from spire.errors import InvalidHandoffState, PreconditionViolation
from spire.planner import (
    PlannedAction,
    describe,
    execute_traditional,
    oracle_rollout,
    plan,
    run_prefix,
    run_spire,
    verify_planner_validity,
)


def test_fresh_state_plan_hands_off_section_one(grid2):
    s = grid2.reset(0)
    p = plan(s, grid2.task, grid2.model)
    assert p.first_learned().section == 1
    assert p.learned_sections[0] == 1


def test_plan_from_goal_state_is_empty(grid2):
    s = grid2.reset(0)
    done = s._replace(inserted=2, homes=(None, None))
    assert len(plan(done, grid2.task, grid2.model)) == 0


def test_plan_rejects_state_outside_handback_sets(grid2):
    s = grid2.reset(0)
    with pytest.raises(InvalidHandoffState):
        plan(s._replace(depth=3), grid2.task, grid2.model)


def _bfs_cells(env, src, dst):
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in env.neighbours(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist[dst]


def test_prefix_length_matches_bfs_oracle(grid2):
    # walking part of the prefix: start -> home of o1 -> nearest zone-1 cell
    for seed in range(20):
        s0 = grid2.reset(seed)
        p = plan(s0, grid2.task, grid2.model)
        moves = [a for a in p.traditional_prefix() if a.name == "move"]
        home = s0.homes[0]
        to_zone = min(_bfs_cells(grid2, home, z) for z in grid2.zones[0])
        assert len(moves) == _bfs_cells(grid2, s0.cell, home) + to_zone


def test_move_action_updates_cell(grid2):
    s = grid2.reset(0)
    p = plan(s, grid2.task, grid2.model)
    a = p[0]
    assert a.name == "move"
    s2 = execute_traditional(a, s, grid2.model)
    assert ("At", a.args[1]) in grid2.ground(s2)


def test_pick_grasps_and_clears_hand_empty(grid2):
    s = grid2.reset(0)
    for a in plan(s, grid2.task, grid2.model):
        facts = grid2.ground(s)
        if a.name == "pick":
            assert ("HandEmpty",) in facts
            s = execute_traditional(a, s, grid2.model)
            after = grid2.ground(s)
            assert ("Holding", "o1") in after and ("HandEmpty",) not in after
            assert not any(f[0] == "AtHome" and f[1] == "o1" for f in after)
            return
        s = execute_traditional(a, s, grid2.model)
    pytest.fail("no pick in the plan")


def test_execute_learned_or_inapplicable_action_raises(grid2):
    s = grid2.reset(0)
    p = plan(s, grid2.task, grid2.model)
    with pytest.raises(PreconditionViolation):
        execute_traditional(p.first_learned(), s, grid2.model)
    later = [a for a in p.traditional_prefix() if a.name == "pick"][0]
    if not later.applicable(grid2.ground(s)):
        with pytest.raises(PreconditionViolation):
            execute_traditional(later, s, grid2.model)


def test_prefix_lands_in_precondition_set_for_sampled_states():
    for env in (GridChain(k=2), PointChain(k=2)):
        rng = np.random.default_rng(1)
        for n in range(1000 if env.discrete else 200):
            s = env.sample_initial(rng)
            s2, learned = run_prefix(plan(s, env.task, env.model), s, env.model)
            assert env.task.section(learned.section).precondition(s2)


def test_plans_are_deterministic(grid2):
    s = grid2.reset(3)
    assert plan(s, grid2.task, grid2.model) == plan(s, grid2.task, grid2.model)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_bundled_domains_are_valid(k):
    rep = verify_planner_validity(GridChain(k=k))
    assert rep.all_valid, str(rep)


def test_broken_goal_set_detected(grid2):
    grid2.task = dataclasses.replace(grid2.task, goal_set=lambda s: False)
    rep = verify_planner_validity(grid2)
    assert rep.sequence_valid and rep.section_valid and not rep.goal_valid
    assert "goal" in rep.witnesses


def test_walled_zone_cell_breaks_section_validity():
    layout = ("Aa.bB", "1#.22", ".....", ".#.#.", ".....")
    env = GridChain(k=2, layout=layout)
    rep = verify_planner_validity(env)
    assert not rep.section_valid
    w = rep.witnesses["section/1"]
    assert w.cell == (1, 0)


def test_oracle_rollout_every_admissible_start(grid2):
    expert = ScriptedExpert(grid2)
    starts = [s for s in grid2.enumerate_states() if grid2.task.initial_set(s)]
    assert len(starts) > 50
    assert all(oracle_rollout(grid2, expert, s) for s in starts)


def test_oracle_rollout_rejects_inadmissible_start(grid2):
    s = grid2.reset(0)
    assert not oracle_rollout(grid2, ScriptedExpert(grid2), s._replace(cell=(0, 1)))


def test_random_agent_is_total(grid2):
    rng = np.random.default_rng(0)
    for seed in range(10):
        grid2.reset(seed)
        res = run_spire(grid2, lambda obs, sec: int(rng.integers(5)))
        assert isinstance(res.success, bool)


def test_spire_loop_replans_after_each_section(grid2):
    grid2.reset(0)
    expert = ScriptedExpert(grid2)
    res = run_spire(grid2, expert.agent())
    assert res.success and res.sections_completed == 2 and len(res.section_steps) == 2
    assert res.agent_steps == sum(res.section_steps)


def test_describe_lists_learned_schemas(grid2):
    text = describe(grid2.model)
    assert "learned -> section 1" in text and "learned -> section 2" in text
    assert isinstance(plan(grid2.reset(0), grid2.task, grid2.model)[0], PlannedAction)
