"""PointChain-k: a continuous 2D point mass threading targets in order.

State is ``[x, y, stage]`` with ``x, y`` in ``[-1, 1]`` and ``stage`` the
number of targets already entered.  Each target is a disk that can only be
entered through a narrow cone around its approach direction; entering from
any other direction bounces the point back.  The planner moves the point to
a staging disk below the next target and hands off; the policy must then
thread the cone.  ``init_radius`` controls how broad the initial region is.
"""

from __future__ import annotations

import numpy as np

from ..core import SectionSpec, TaskSpec
from ..errors import OutOfCompetence, PreconditionViolation, SpireError
from ..planner import ActionSchema, PlannerModel
from .base import Environment


class PointChain(Environment):
    discrete = False
    action_dim = 2

    def __init__(
        self,
        k: int = 2,
        init_radius: float = 0.1,
        max_speed: float = 0.02,
        target_radius: float = 0.08,
        cone_deg: float = 30.0,
        staging_offset: float = 0.4,
        staging_radius: float = 0.08,
        init_center=(0.0, -0.6),
        step_limit: int = 100,
        discount: float = 0.99,
    ):
        super().__init__()
        self.k = k
        self.init_radius = float(init_radius)
        self.max_speed = float(max_speed)
        self.target_radius = float(target_radius)
        self.cone = np.deg2rad(cone_deg)
        self.staging_offset = float(staging_offset)
        self.staging_radius = float(staging_radius)
        self.init_center = np.asarray(init_center, dtype=float)
        self.step_limit = step_limit
        xs = np.linspace(-0.6, 0.6, k) if k > 1 else np.zeros(1)
        self.centers = np.stack([xs, np.full(k, 0.5)], axis=1)
        self.directions = np.tile([0.0, 1.0], (k, 1))
        self.staging = self.centers - self.directions * staging_offset
        broad = "-broad" if init_radius > 0.1 else ""
        self.name = f"PointChain-{k}{broad}"
        self.obs_dim = 2 + k
        self.low = np.array([-1.0, -1.0, 0.0])
        self.high = np.array([1.0, 1.0, float(k)])
        self.task = self._make_task(discount)
        self.model = self._make_model()

    # -- predicates ---------------------------------------------------------
    @staticmethod
    def stage(s):
        return int(round(s[2]))

    def in_initial(self, s):
        return self.stage(s) == 0 and np.linalg.norm(s[:2] - self.init_center) <= self.init_radius + 1e-9

    def _pre(self, i):
        def pre(s):
            return self.stage(s) == i - 1 and np.linalg.norm(s[:2] - self.staging[i - 1]) <= self.staging_radius + 1e-9

        return pre

    def _eff(self, i):
        def eff(s):
            return self.stage(s) == i

        return eff

    def _make_task(self, discount):
        sections = tuple(
            SectionSpec(i, self._pre(i), self._eff(i), self.step_limit, name=f"thread target {i}")
            for i in range(1, self.k + 1)
        )
        k = self.k
        return TaskSpec(
            domain=self.name,
            sections=sections,
            initial_set=self.in_initial,
            goal_set=lambda s: self.stage(s) == k,
            discount=discount,
            params={"k": k, "init_radius": self.init_radius, "step_limit": self.step_limit},
        )

    # -- planner model ------------------------------------------------------
    def region(self, s) -> str:
        p = s[:2]
        for j in range(self.k):
            if np.linalg.norm(p - self.centers[j]) <= self.target_radius:
                return f"target{j + 1}"
        for j in range(self.k):
            if np.linalg.norm(p - self.staging[j]) <= self.staging_radius + 1e-9:
                return f"staging{j + 1}"
        if np.linalg.norm(p - self.init_center) <= self.init_radius + 1e-9:
            return "start"
        return "free"

    def _make_model(self):
        regions = ["start", "free"] + [f"target{j}" for j in range(1, self.k + 1)]
        staging = [f"staging{j}" for j in range(1, self.k + 1)]
        types = {"region": regions + staging, "staging": staging}
        schemas = [
            ActionSchema(
                "move",
                (("?from", "region"), ("?to", "staging")),
                pre=(("At", "?from"),),
                add=(("At", "?to"),),
                delete=(("At", "?from"),),
            )
        ]
        for i in range(1, self.k + 1):
            add = [("Inserted", f"o{i}"), ("At", f"target{i}")]
            if i < self.k:
                add.append(("Next", f"o{i + 1}"))
            schemas.append(
                ActionSchema(
                    f"thread_o{i}",
                    (),
                    pre=(("At", f"staging{i}"), ("Next", f"o{i}")),
                    add=tuple(add),
                    delete=(("At", f"staging{i}"), ("Next", f"o{i}")),
                    learned=True,
                    section=i,
                )
            )
        goal = [("Inserted", f"o{self.k}")]
        return PlannerModel(self.name, schemas, types, goal, (), self.ground, self.realize)

    def ground(self, s) -> frozenset:
        n = self.stage(s)
        facts = {("At", self.region(s))}
        facts.update(("Inserted", f"o{j}") for j in range(1, n + 1))
        if n < self.k:
            facts.add(("Next", f"o{n + 1}"))
        return frozenset(facts)

    def realize(self, action, s):
        if action.name != "move":
            raise PreconditionViolation(f"no trajectory script for {action.name}")
        j = int(action.args[1][len("staging"):]) - 1
        goal = self.staging[j]
        s = np.array(s, dtype=float)
        for _ in range(1000):
            d = goal - s[:2]
            if np.linalg.norm(d) <= self.staging_radius:
                return s
            step = d / max(np.linalg.norm(d), 1e-12)
            nxt = self._move(s, step, active=None)
            if np.allclose(nxt[:2], s[:2]):
                raise SpireError(f"scripted move to staging{j + 1} is blocked at {s[:2]}")
            s = nxt
        raise SpireError("scripted move did not converge")

    # -- dynamics -------------------------------------------------------------
    def sample_initial(self, rng):
        r = self.init_radius * np.sqrt(rng.uniform())
        th = rng.uniform(0, 2 * np.pi)
        p = self.init_center + r * np.array([np.cos(th), np.sin(th)])
        return np.array([p[0], p[1], 0.0])

    def check_action(self, a):
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.shape != (self.action_dim,):
            raise ValueError(f"expected a {self.action_dim}-d action, got shape {a.shape}")
        return np.clip(a, -1.0, 1.0)

    def _move(self, s, a, active):
        p = s[:2]
        q = np.clip(p + np.clip(a, -1, 1) * self.max_speed, -1.0, 1.0)
        stage = s[2]
        for j in range(self.k):
            c = self.centers[j]
            if np.linalg.norm(q - c) <= self.target_radius < np.linalg.norm(p - c):
                step = q - p
                cos = step @ self.directions[j] / max(np.linalg.norm(step), 1e-12)
                if active == j + 1 and int(round(stage)) == j and cos >= np.cos(self.cone):
                    stage = float(j + 1)
                else:
                    q = p  # bounced off the fixture
                break
        return np.array([q[0], q[1], stage])

    def transition(self, s, a, section):
        return self._move(np.asarray(s, dtype=float), a, active=section)

    def observe_state(self, s, section):
        onehot = np.zeros(self.k)
        if section is not None:
            onehot[section - 1] = 1.0
        return np.concatenate([np.asarray(s[:2], dtype=float), onehot])

    def in_bounds(self, s):
        return bool(np.all(s >= self.low - 1e-12) and np.all(s <= self.high + 1e-12))

    # -- expert -------------------------------------------------------------
    def expert_action(self, s, section):
        j = section - 1
        if self.stage(s) != j or not self.in_bounds(s):
            raise OutOfCompetence(f"expert cannot handle {s!r} in section {section}")
        c, d = self.centers[j], self.directions[j]
        rel = s[:2] - c
        along = rel @ d
        lateral = rel - along * d
        lead = self.target_radius + 2 * self.max_speed
        if np.linalg.norm(lateral) <= 0.3 * self.target_radius and along <= -self.target_radius:
            return d.copy()
        waypoint = c - d * lead
        return np.clip((waypoint - s[:2]) / self.max_speed, -1.0, 1.0)
