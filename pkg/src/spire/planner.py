"""Symbolic planner with traditional and learned actions.

Action schemas follow the usual STRIPS shape: typed parameters, a
precondition list and add/delete effect lists over predicate literals.
Schemas flagged ``learned`` stand for handoff sections; the planner treats
their effects as the symbolic outcome of running a policy and always replans
after one of them executes.

A :class:`PlannerModel` couples the schemas with two domain hooks:
``ground`` maps a concrete state to its set of true facts, and ``realize``
runs the deterministic trajectory attached to a traditional action.
"""

from __future__ import annotations

import itertools
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from .core import TaskSpec
from .errors import (
    DomainTooLarge,
    InvalidHandoffState,
    PreconditionViolation,
    SpireError,
    UnreachablePrecondition,
)

log = logging.getLogger(__name__)

TRADITIONAL = "traditional"
LEARNED = "learned"


def lit(name, *args):
    return (name,) + tuple(args)


def fmt_lit(f):
    return f"{f[0]}({', '.join(str(a) for a in f[1:])})"


@dataclass(frozen=True)
class ActionSchema:
    name: str
    params: tuple  # ((var, type), ...)
    pre: tuple
    add: tuple
    delete: tuple = ()
    learned: bool = False
    section: int | None = None

    def __post_init__(self):
        if self.learned and self.section is None:
            raise ValueError(f"learned schema {self.name} needs a section binding")
        if set(self.add) & set(self.delete):
            raise ValueError(f"schema {self.name} both adds and deletes the same literal")

    def to_dict(self):
        return {
            "name": self.name,
            "params": [list(p) for p in self.params],
            "pre": [list(f) for f in self.pre],
            "add": [list(f) for f in self.add],
            "del": [list(f) for f in self.delete],
            "learned": self.learned,
            "section": self.section,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            params=tuple(tuple(p) for p in d["params"]),
            pre=tuple(tuple(f) for f in d["pre"]),
            add=tuple(tuple(f) for f in d["add"]),
            delete=tuple(tuple(f) for f in d.get("del", ())),
            learned=bool(d.get("learned", False)),
            section=d.get("section"),
        )


@dataclass(frozen=True, order=True)
class PlannedAction:
    name: str
    args: tuple
    kind: str = field(compare=False)
    section: int | None = field(default=None, compare=False)
    pre: frozenset = field(default=frozenset(), compare=False, repr=False)
    add: frozenset = field(default=frozenset(), compare=False, repr=False)
    delete: frozenset = field(default=frozenset(), compare=False, repr=False)

    @property
    def is_learned(self):
        return self.kind == LEARNED

    def applicable(self, facts) -> bool:
        return self.pre <= facts

    def apply(self, facts) -> frozenset:
        return (facts - self.delete) | self.add

    def __str__(self):
        tag = f" [section {self.section}]" if self.is_learned else ""
        return f"{self.name}({', '.join(map(str, self.args))}){tag}"


class SymbolicPlan(tuple):
    """Ordered tuple of :class:`PlannedAction`."""

    def __new__(cls, actions=()):
        plan = super().__new__(cls, tuple(actions))
        sections = [a.section for a in plan if a.is_learned]
        if any(b <= a for a, b in zip(sections, sections[1:])):
            raise ValueError(f"learned sections out of order: {sections}")
        return plan

    @property
    def learned_sections(self):
        return [a.section for a in self if a.is_learned]

    def traditional_prefix(self):
        out = []
        for a in self:
            if a.is_learned:
                break
            out.append(a)
        return out

    def first_learned(self):
        for a in self:
            if a.is_learned:
                return a
        return None

    def pretty(self) -> str:
        if not self:
            return "(empty plan: goal already satisfied)"
        return "\n".join(f"{k:3d}. {a}" for k, a in enumerate(self))


def ground_schema(schema: ActionSchema, objects: dict, static: frozenset):
    """All groundings of ``schema`` whose static preconditions hold."""
    var_names = [v for v, _ in schema.params]
    domains = [objects.get(t, ()) for _, t in schema.params]
    static_preds = {f[0] for f in static}
    out = []
    for values in itertools.product(*domains):
        binding = dict(zip(var_names, values))

        def sub(f):
            return (f[0],) + tuple(binding.get(a, a) for a in f[1:])

        pre = [sub(f) for f in schema.pre]
        if any(f[0] in static_preds and f not in static for f in pre):
            continue
        dynamic_pre = frozenset(f for f in pre if f[0] not in static_preds)
        add = frozenset(sub(f) for f in schema.add)
        delete = frozenset(sub(f) for f in schema.delete) - add
        out.append(
            PlannedAction(
                name=schema.name,
                args=tuple(values),
                kind=LEARNED if schema.learned else TRADITIONAL,
                section=schema.section,
                pre=dynamic_pre,
                add=add,
                delete=delete,
            )
        )
    return out


class PlannerModel:
    """Schemas plus the hooks that tie symbolic facts to concrete states.

    ``ground(state) -> frozenset`` of facts; ``realize(action, state) -> state``
    executes a traditional action's trajectory.  Both hooks are optional when
    the model is only used for pure symbolic planning (e.g. from a domain file).
    """

    def __init__(self, name, schemas, objects, goal, static=(), ground=None, realize=None):
        self.name = name
        self.schemas = tuple(schemas)
        self.objects = {k: tuple(v) for k, v in objects.items()}
        self.goal = frozenset(tuple(f) for f in goal)
        self.static = frozenset(tuple(f) for f in static)
        self._ground = ground
        self._realize = realize
        actions = []
        for schema in self.schemas:
            actions.extend(ground_schema(schema, self.objects, self.static))
        # fixed lexicographic tie-breaking
        self.actions = tuple(sorted(actions))
        self._plan_cache = {}

    def ground(self, state) -> frozenset:
        if self._ground is None:
            raise SpireError(f"model {self.name} has no grounding function")
        return self._ground(state)

    def realize(self, action, state):
        if self._realize is None:
            raise SpireError(f"model {self.name} has no trajectory scripts")
        return self._realize(action, state)

    def search(self, facts: frozenset, goal: frozenset | None = None) -> SymbolicPlan | None:
        """Breadth-first search from ``facts`` to a superset of ``goal``."""
        goal = self.goal if goal is None else goal
        key = (facts, goal)
        if key in self._plan_cache:
            return self._plan_cache[key]
        result = None
        if goal <= facts:
            result = SymbolicPlan()
        else:
            parent = {facts: None}
            frontier = deque([facts])
            while frontier and result is None:
                node = frontier.popleft()
                for a in self.actions:
                    if not a.pre <= node:
                        continue
                    nxt = a.apply(node)
                    if nxt in parent:
                        continue
                    parent[nxt] = (node, a)
                    if goal <= nxt:
                        steps = []
                        cur = nxt
                        while parent[cur] is not None:
                            prev, act = parent[cur]
                            steps.append(act)
                            cur = prev
                        result = SymbolicPlan(reversed(steps))
                        break
                    frontier.append(nxt)
        self._plan_cache[key] = result
        return result

    def to_dict(self):
        return {
            "domain": self.name,
            "types": {k: list(v) for k, v in self.objects.items()},
            "static": sorted(list(f) for f in self.static),
            "actions": [s.to_dict() for s in self.schemas],
            "goal": sorted(list(f) for f in self.goal),
        }

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, d, ground=None, realize=None):
        return cls(
            name=d["domain"],
            schemas=[ActionSchema.from_dict(s) for s in d["actions"]],
            objects=d["types"],
            goal=[tuple(f) for f in d["goal"]],
            static=[tuple(f) for f in d.get("static", ())],
            ground=ground,
            realize=realize,
        )

    @classmethod
    def load(cls, path, ground=None, realize=None):
        with open(path) as fh:
            return cls.from_dict(json.load(fh), ground=ground, realize=realize)


def current_section(s, task: TaskSpec) -> int:
    """Index ``i`` of the next section to run, i.e. ``s`` lies in the effect set of ``i - 1``.

    Returns ``N + 1`` when the final effect set holds.  Raises
    :class:`InvalidHandoffState` when ``s`` is in none of the hand-back sets.
    """
    for i in range(task.num_sections + 1, 0, -1):
        if task.effect_before(i)(s):
            return i
    raise InvalidHandoffState(f"state {s!r} is not in any section's hand-back set")


def plan(s, task: TaskSpec, model: PlannerModel) -> SymbolicPlan:
    i = current_section(s, task)
    if i > task.num_sections:
        return SymbolicPlan()
    result = model.search(model.ground(s))
    if result is None:
        raise UnreachablePrecondition(f"no plan from section {i} state {s!r}")
    learned = result.learned_sections
    if learned and learned[0] != i:
        raise UnreachablePrecondition(
            f"plan from section {i} hands off to section {learned[0]} first"
        )
    return result


def execute_traditional(a: PlannedAction, s, model: PlannerModel):
    if a.is_learned:
        raise PreconditionViolation(f"{a} is a learned action")
    facts = model.ground(s)
    if not a.applicable(facts):
        missing = ", ".join(fmt_lit(f) for f in sorted(a.pre - facts))
        raise PreconditionViolation(f"{a}: unmet preconditions {missing}")
    s2 = model.realize(a, s)
    after = model.ground(s2)
    if not (a.add <= after and not (a.delete & after)):
        raise SpireError(f"trajectory script for {a} did not realise its effects")
    return s2


def run_prefix(p: SymbolicPlan, s, model: PlannerModel):
    """Execute traditional actions until the first learned one."""
    for a in p:
        if a.is_learned:
            return s, a
        s = execute_traditional(a, s, model)
    return s, None


@dataclass
class RolloutResult:
    success: bool
    agent_steps: int = 0
    sections_completed: int = 0
    reason: str = ""
    section_steps: list = field(default_factory=list)


def run_spire(env, agent, max_replans: int = 1000) -> RolloutResult:
    """Test-time SPIRE loop: plan, run traditional actions, hand off, replan.

    ``env`` must already be reset.  ``agent(obs, section) -> action`` drives
    each learned section until its effect holds or its step limit is hit.
    """
    task = env.task
    model = env.model
    res = RolloutResult(success=False)
    for _ in range(max_replans):
        s = env.state
        if task.goal_set(s):
            res.success = True
            return res
        try:
            i = current_section(s, task)
            p = plan(s, task, model)
        except SpireError as exc:
            res.reason = f"planner: {exc}"
            return res
        if i > task.num_sections:
            # final effect set holds but goal does not: goal validity is broken
            res.reason = "final effect set reached outside goal set"
            return res
        try:
            s, learned = run_prefix(p, s, model)
        except SpireError as exc:
            res.reason = f"traditional execution: {exc}"
            return res
        env.set_state(s)
        if learned is None:
            continue
        env.begin_section(learned.section)
        steps = 0
        while True:
            obs = env.observe()
            tr = env.step(agent(obs, learned.section))
            steps += 1
            if tr.done or tr.truncated:
                break
        res.agent_steps += steps
        res.section_steps.append(steps)
        if tr.reward != 1:
            res.reason = f"section {learned.section} not completed"
            return res
        res.sections_completed += 1
    res.reason = "replan budget exhausted"
    return res


def oracle_rollout(env, expert, initial_state=None, seed: int = 0) -> bool:
    """Run the full loop with ``expert``; constructive check that the goal is reachable.

    When ``initial_state`` is given it must be admissible, otherwise the
    rollout is reported as a failure before any planning happens.
    """
    if initial_state is None:
        env.reset(seed)
    else:
        if not env.task.initial_set(initial_state):
            log.warning("initial state %r is outside the admissible set", initial_state)
            return False
        env.reset(seed)
        env.set_state(initial_state)
    if hasattr(expert, "agent"):
        agent = expert.agent(env)  # scripted experts read the true state
    else:
        agent = expert if callable(expert) else expert.act
    try:
        return run_spire(env, agent).success
    except SpireError as exc:
        log.warning("rollout aborted: %s", exc)
        return False


@dataclass
class ValidityReport:
    sequence_valid: bool
    section_valid: bool
    goal_valid: bool
    n_states: int
    witnesses: dict = field(default_factory=dict)

    @property
    def all_valid(self):
        return self.sequence_valid and self.section_valid and self.goal_valid

    def __str__(self):
        lines = [
            f"sequence validity: {self.sequence_valid}",
            f"section validity:  {self.section_valid}",
            f"goal validity:     {self.goal_valid}",
            f"states enumerated: {self.n_states}",
        ]
        for k, v in self.witnesses.items():
            lines.append(f"  witness[{k}]: {v!r}")
        return "\n".join(lines)


def section_reachable(env, s, section: int) -> bool:
    """BFS over agent actions from ``s`` to the section's effect set."""
    spec = env.task.section(section)
    seen = {s}
    frontier = deque([s])
    while frontier:
        u = frontier.popleft()
        if spec.effect(u):
            return True
        for a in range(env.n_actions):
            v = env.transition(u, a, section)
            if v not in seen:
                seen.add(v)
                frontier.append(v)
    return False


def verify_planner_validity(env, max_states: int = 100_000) -> ValidityReport:
    """Exhaustively check sequence, section and goal validity on an enumerable domain."""
    task, model = env.task, env.model
    states = list(env.enumerate_states(limit=max_states + 1))
    if len(states) > max_states:
        raise DomainTooLarge(f"{env.name} has more than {max_states} states")
    witnesses = {}

    seq_ok = True
    for i in range(1, task.num_sections + 1):
        before = task.effect_before(i)
        pre = task.section(i).precondition
        for s in states:
            if not before(s):
                continue
            try:
                p = plan(s, task, model)
                s2, learned = run_prefix(p, s, model)
                ok = learned is not None and learned.section == i and pre(s2)
            except SpireError:
                ok = False
            if not ok:
                seq_ok = False
                witnesses.setdefault(f"sequence/{i}", s)
                break

    sec_ok = True
    for i in range(1, task.num_sections + 1):
        pre = task.section(i).precondition
        for s in states:
            if pre(s) and not section_reachable(env, s, i):
                sec_ok = False
                witnesses.setdefault(f"section/{i}", s)
                break

    goal_ok = True
    last = task.section(task.num_sections).effect
    for s in states:
        if last(s) and not task.goal_set(s):
            goal_ok = False
            witnesses.setdefault("goal", s)
            break

    return ValidityReport(seq_ok, sec_ok, goal_ok, len(states), witnesses)


def load_domain_file(path) -> PlannerModel:
    return PlannerModel.load(path)


def facts_from_strings(items: Iterable[str]) -> frozenset:
    """Parse ``"Pred(a, b)"`` strings into fact tuples."""
    out = []
    for item in items:
        item = item.strip()
        name, _, rest = item.partition("(")
        args = [a.strip() for a in rest.rstrip(")").split(",") if a.strip()]
        out.append((name.strip(),) + tuple(args))
    return frozenset(out)


def describe(model: PlannerModel) -> str:
    lines = [f"domain {model.name}: {len(model.schemas)} schemas, {len(model.actions)} ground actions"]
    for s in model.schemas:
        kind = f"learned -> section {s.section}" if s.learned else "traditional"
        lines.append(f"  {s.name}{tuple(v for v, _ in s.params)} ({kind})")
        lines.append(f"    pre: {', '.join(fmt_lit(f) for f in s.pre)}")
        eff = [fmt_lit(f) for f in s.add] + ["~" + fmt_lit(f) for f in s.delete]
        lines.append(f"    eff: {', '.join(eff)}")
    return "\n".join(lines)

