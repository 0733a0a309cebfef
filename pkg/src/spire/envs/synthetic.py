"""Synthetic chain with prescribed per-section success probabilities.

Used to exercise the scheduler without any learning: in section ``j`` every
agent step succeeds with probability ``success_rates[j-1]`` regardless of
the action.  With ``success_rates`` all zero each section runs exactly
``step_limit`` steps, which makes the throughput model easy to check.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..core import SectionSpec, TaskSpec
from ..errors import PreconditionViolation
from ..planner import ActionSchema, PlannerModel
from .base import Environment


class ChainState(NamedTuple):
    stage: int
    ready: bool


class SyntheticChain(Environment):
    discrete = True
    n_actions = 2

    def __init__(self, success_rates=(0.9, 0.5), step_limit: int = 1, discount: float = 0.99):
        super().__init__()
        self.success_rates = tuple(float(p) for p in success_rates)
        self.k = len(self.success_rates)
        self.step_limit = step_limit
        self.name = f"Synthetic-{self.k}"
        k = self.k
        sections = tuple(
            SectionSpec(
                i,
                (lambda s, i=i: s.stage == i - 1 and s.ready),
                (lambda s, i=i: s.stage == i and not s.ready),
                step_limit,
            )
            for i in range(1, k + 1)
        )
        self.task = TaskSpec(
            domain=self.name,
            sections=sections,
            initial_set=lambda s: s == ChainState(0, False),
            goal_set=lambda s: s.stage == k,
            discount=discount,
            params={"success_rates": list(self.success_rates), "step_limit": step_limit},
        )
        objs = [f"o{i}" for i in range(1, k + 1)]
        schemas = [
            ActionSchema(
                "prepare",
                (("?o", "obj"),),
                pre=(("Next", "?o"), ("Idle",)),
                add=(("Ready", "?o"),),
                delete=(("Idle",),),
            )
        ]
        for i in range(1, k + 1):
            add = [("Inserted", f"o{i}"), ("Idle",)]
            if i < k:
                add.append(("Next", f"o{i + 1}"))
            schemas.append(
                ActionSchema(
                    f"solve_o{i}",
                    (),
                    pre=(("Ready", f"o{i}"), ("Next", f"o{i}")),
                    add=tuple(add),
                    delete=(("Ready", f"o{i}"), ("Next", f"o{i}")),
                    learned=True,
                    section=i,
                )
            )
        self.model = PlannerModel(
            self.name, schemas, {"obj": objs}, [("Inserted", f"o{k}")], (), self.ground, self.realize
        )

    def ground(self, s):
        facts = {("Inserted", f"o{j}") for j in range(1, s.stage + 1)}
        if s.stage < self.k:
            facts.add(("Next", f"o{s.stage + 1}"))
            facts.add(("Ready", f"o{s.stage + 1}") if s.ready else ("Idle",))
        else:
            facts.add(("Idle",))
        return frozenset(facts)

    def realize(self, action, s):
        if action.name != "prepare" or s.ready:
            raise PreconditionViolation(f"cannot run {action} from {s}")
        return s._replace(ready=True)

    def sample_initial(self, rng):
        return ChainState(0, False)

    def check_action(self, a):
        return int(a)

    def transition(self, s, a, section):
        if s.stage != section - 1 or not s.ready:
            return s
        if self.rng.uniform() < self.success_rates[section - 1]:
            return ChainState(section, False)
        return s

    def observe_state(self, s, section):
        return s.stage

    def encode_state(self, s):
        return [s.stage, bool(s.ready)]

    def decode_state(self, obj):
        return ChainState(int(obj[0]), bool(obj[1]))

    @property
    def n_obs(self):
        return self.k + 1

    def enumerate_states(self, limit=None):
        return [ChainState(n, r) for n in range(self.k + 1) for r in (False, True) if not (n == self.k and r)]

    def expert_action(self, s, section):
        return 0
