"""Planner-induced MDP series: sections, tasks, transitions and sparse rewards.

A task is split by the planner into ``N`` handoff sections.  Every section
shares the environment dynamics but has its own precondition set (where the
learned policy takes over) and effect set (where it earns reward 1 and hands
control back).  States are either hashable tuples (enumerable domains) or
bounded float vectors (continuous domains); predicates are plain callables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

State = Any
Predicate = Callable[[State], bool]


@dataclass(frozen=True)
class SectionSpec:
    index: int
    precondition: Predicate
    effect: Predicate
    step_limit: int = 100
    name: str = ""

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("section indices start at 1")
        if self.step_limit < 1:
            raise ValueError("step_limit must be >= 1")


@dataclass(frozen=True)
class TaskSpec:
    domain: str
    sections: tuple
    initial_set: Predicate
    goal_set: Predicate
    discount: float = 0.99
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        for i, sec in enumerate(self.sections, start=1):
            if sec.index != i:
                raise ValueError(f"section {i} carries index {sec.index}")

    @property
    def num_sections(self) -> int:
        return len(self.sections)

    def section(self, i: int) -> SectionSpec:
        return self.sections[i - 1]

    def effect_before(self, i: int) -> Predicate:
        """Effect set of section ``i - 1``; the initial set stands in for section 0."""
        if i == 1:
            return self.initial_set
        return self.sections[i - 2].effect

    def to_config(self) -> dict:
        return {
            "domain": self.domain,
            "num_sections": self.num_sections,
            "step_limits": [s.step_limit for s in self.sections],
            "discount": self.discount,
            "params": dict(self.params),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_config(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class Transition:
    state: State
    action: Any
    next_state: State
    reward: int
    section: int
    done: bool = False
    truncated: bool = False

    def __post_init__(self):
        if self.reward not in (0, 1):
            raise ValueError(f"reward must be 0 or 1, got {self.reward!r}")
        if self.done and self.truncated:
            raise ValueError("a transition cannot be both terminal and truncated")


def section_reward(s: State, spec: SectionSpec) -> int:
    return 1 if spec.effect(s) else 0


def is_goal(s: State, task: TaskSpec) -> bool:
    return bool(task.goal_set(s))


def discounted_return(trajectory: Sequence[Transition], gamma: float) -> float:
    if len(trajectory) == 0:
        raise ValueError("discounted_return of an empty trajectory")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    rewards = np.array([t.reward for t in trajectory], dtype=float)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


def rewards_return(rewards, gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=float)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))
