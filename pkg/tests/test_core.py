import math

import pytest

from spire.core import (
    SectionSpec,
    TaskSpec,
    Transition,
    discounted_return,
    is_goal,
    rewards_return,
    section_reward,
)


def _task(n=2):
    secs = tuple(SectionSpec(i, lambda s, i=i: s == i - 1, lambda s, i=i: s == i) for i in range(1, n + 1))
    return TaskSpec("toy", secs, initial_set=lambda s: s == 0, goal_set=lambda s: s == n)


def test_section_reward_is_indicator_of_effect_set():
    spec = SectionSpec(1, lambda s: True, lambda s: s >= 3)
    assert [section_reward(s, spec) for s in range(5)] == [0, 0, 0, 1, 1]


def test_goal_and_effect_before():
    task = _task(3)
    assert is_goal(3, task) and not is_goal(2, task)
    assert task.effect_before(1)(0)
    assert task.effect_before(3)(2) and not task.effect_before(3)(1)
    assert task.num_sections == 3


def test_discounted_return_matches_hand_sum():
    trs = [Transition(0, 0, 0, r, 1) for r in (0, 0, 1)]
    assert discounted_return(trs, 0.9) == pytest.approx(0.81)
    assert rewards_return([1, 1], 0.5) == pytest.approx(1.5)


@pytest.mark.parametrize("gamma", [0.0, 1.5, -0.1])
def test_discounted_return_rejects_bad_gamma(gamma):
    with pytest.raises(ValueError):
        discounted_return([Transition(0, 0, 0, 0, 1)], gamma)


def test_discounted_return_rejects_empty():
    with pytest.raises(ValueError):
        discounted_return([], 0.99)


def test_transition_rejects_non_binary_reward_and_double_flags():
    with pytest.raises(ValueError):
        Transition(0, 0, 0, 0.5, 1)
    with pytest.raises(ValueError):
        Transition(0, 0, 0, 1, 1, done=True, truncated=True)


def test_section_indices_must_be_consecutive():
    with pytest.raises(ValueError):
        TaskSpec("bad", (SectionSpec(2, bool, bool),), bool, bool)
    with pytest.raises(ValueError):
        SectionSpec(0, bool, bool)
    with pytest.raises(ValueError):
        SectionSpec(1, bool, bool, step_limit=0)


def test_task_config_round_trip_fields():
    cfg = _task().to_config()
    assert cfg["num_sections"] == 2 and cfg["step_limits"] == [100, 100]
    assert math.isclose(cfg["discount"], 0.99)
