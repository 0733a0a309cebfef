"""Scripted expert standing in for a human demonstrator."""

from __future__ import annotations

import numpy as np


class ScriptedExpert:
    """Closed-form controller for every handoff section of ``env``.

    With ``epsilon > 0`` the discrete expert takes a uniformly random action
    with that probability; the continuous expert adds Gaussian noise of that
    scale before clipping.  ``act`` takes the environment state, not an
    observation; :meth:`agent` adapts it to the ``(obs, section)`` interface
    used by rollouts.
    """

    def __init__(self, env, epsilon: float = 0.0, seed=None):
        self.env = env
        self.epsilon = float(epsilon)
        self.rng = np.random.default_rng(seed)

    def act(self, s, section):
        a = self.env.expert_action(s, section)
        if self.epsilon <= 0:
            return a
        if self.env.discrete:
            if self.rng.uniform() < self.epsilon:
                return int(self.rng.integers(self.env.n_actions))
            return a
        noisy = np.asarray(a, dtype=float) + self.epsilon * self.rng.standard_normal(self.env.action_dim)
        return np.clip(noisy, -1.0, 1.0)

    def agent(self, env=None):
        env = self.env if env is None else env

        def _agent(obs, section):
            return self.act(env.state, section)

        return _agent
