"""Environment base class shared by the bundled domains."""

from __future__ import annotations

import numpy as np

from ..core import Transition, section_reward
from ..errors import InvalidHandoffState, StepAfterDone
from .. import planner as _planner


class Environment:
    """Seeded, single-owner environment with planner hooks.

    Subclasses provide ``sample_initial(rng)``, ``transition(s, a, section)``,
    ``observe_state(s, section)`` and ``check_action(a)``; they also set
    ``task`` and ``model``.  ``step`` only runs while a learned section is
    active; traditional actions go through :meth:`execute_traditional`.
    """

    name = "base"
    discrete = True
    n_actions = 0
    action_dim = 0
    obs_dim = 0

    def __init__(self):
        self._state = None
        self.active_section = None
        self.section_steps = 0
        self.steps = 0
        self.rng = np.random.default_rng(0)

    # -- episode control -------------------------------------------------
    def reset(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self._state = self.sample_initial(self.rng)
        self.active_section = None
        self.section_steps = 0
        self.steps = 0
        return self._state

    @property
    def state(self):
        return self._state

    def set_state(self, s):
        self._state = s

    def begin_section(self, i: int):
        spec = self.task.section(i)
        if not spec.precondition(self._state):
            raise InvalidHandoffState(f"section {i} handed off outside its precondition set")
        self.active_section = i
        self.section_steps = 0

    def step(self, action) -> Transition:
        if self.active_section is None:
            raise StepAfterDone("no learned section is active")
        i = self.active_section
        spec = self.task.section(i)
        a = self.check_action(action)
        s = self._state
        s2 = self.transition(s, a, i)
        r = section_reward(s2, spec)
        self.section_steps += 1
        self.steps += 1
        done = r == 1
        truncated = (not done) and self.section_steps >= spec.step_limit
        if done or truncated:
            self.active_section = None
        self._state = s2
        return Transition(s, a, s2, r, i, done, truncated)

    def execute_traditional(self, action):
        self._state = _planner.execute_traditional(action, self._state, self.model)
        return self._state

    def observe(self, s=None, section=None):
        s = self._state if s is None else s
        section = self.active_section if section is None else section
        return self.observe_state(s, section)

    def features(self, states, sections):
        """Batch of observations for learner-side use."""
        return np.array([self.observe_state(s, i) for s, i in zip(states, sections)])

    def encode_state(self, s):
        """JSON-friendly form of a state."""
        return np.asarray(s, dtype=float).tolist()

    def decode_state(self, obj):
        return np.asarray(obj, dtype=float)

    # -- subclass hooks --------------------------------------------------
    def sample_initial(self, rng):
        raise NotImplementedError

    def transition(self, s, a, section):
        raise NotImplementedError

    def observe_state(self, s, section):
        raise NotImplementedError

    def check_action(self, a):
        return a
