"""GridChain-k: a discrete multi-stage insertion gridworld.

The agent fetches ``k`` objects in order and inserts each one into its
fixture.  Walking and grasping are scripted planner actions.  Insertion is
the learned part: once the agent holds object ``i`` inside fixture zone
``i`` it must reach the zone's entrance cell and then perform a fixed
sequence of precise approach moves.  Any wrong move while the item is
partially inserted jams it and the sequence restarts.  During a handoff the
agent cannot leave the fixture zone.

Layout legend::

    #   wall              A, B, ...  fixture cells (not walkable)
    a, b, ...  zone entrance for fixture A, B, ...
    1, 2, ...  other zone cells of section 1, 2, ...
    .   floor
"""

from __future__ import annotations

import itertools
from collections import deque
from typing import NamedTuple

import numpy as np

from ..core import SectionSpec, TaskSpec
from ..errors import OutOfCompetence, PreconditionViolation
from ..planner import ActionSchema, PlannerModel
from .base import Environment

UP, RIGHT, DOWN, LEFT, STAY = range(5)
ACTION_NAMES = ("up", "right", "down", "left", "stay")
MOVES = {UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0), LEFT: (0, -1), STAY: (0, 0)}

DEFAULT_LAYOUT = (
    "Aa.bB",
    "11.22",
    ".....",
    ".#.#.",
    ".....",
)
DEFAULT_HOMES = (
    ((3, 0), (2, 2), (0, 2)),
    ((3, 4), (4, 2), (1, 2)),
)
WIDE_LAYOUT = (
    "Aa.bB.cC",
    "11.22.33",
    "........",
    ".#.#..#.",
    "........",
)
WIDE_HOMES = (
    ((3, 0), (2, 2), (0, 2)),
    ((3, 4), (4, 2), (1, 2)),
    ((3, 7), (4, 5), (0, 5)),
)


class GridState(NamedTuple):
    cell: tuple
    holding: int  # 0 = hand empty, otherwise object id (1-based)
    inserted: int  # objects 1..inserted are in their fixtures
    depth: int  # progress through the approach sequence
    homes: tuple  # home cell per object, None once picked

    def __repr__(self):
        return (
            f"GridState(cell={self.cell}, holding={self.holding}, inserted={self.inserted}, "
            f"depth={self.depth}, homes={self.homes})"
        )


def cell_name(c):
    return f"r{c[0]}c{c[1]}"


def default_codes(k, length):
    return tuple(
        tuple(int(x) for x in np.random.default_rng(1000 + i).integers(0, 4, size=length))
        for i in range(1, k + 1)
    )


class GridChain(Environment):
    discrete = True
    n_actions = 5

    def __init__(
        self,
        k: int = 2,
        layout=None,
        homes=None,
        code_length: int = 6,
        codes=None,
        step_limit: int = 100,
        discount: float = 0.99,
        start_cells=None,
    ):
        super().__init__()
        self.k = k
        if layout is None:
            layout, homes = (DEFAULT_LAYOUT, DEFAULT_HOMES) if k <= 2 else (WIDE_LAYOUT, homes or WIDE_HOMES)
        homes = homes or DEFAULT_HOMES
        self.layout = tuple(layout)
        self.rows = len(self.layout)
        self.cols = len(self.layout[0])
        self.code_length = code_length
        self.codes = tuple(tuple(c) for c in (codes or default_codes(k, code_length)))
        if len(self.codes) != k or any(len(c) != code_length for c in self.codes):
            raise ValueError("one approach code of length code_length per section")
        self.homes = tuple(tuple(tuple(c) for c in h) for h in homes[:k])
        self.step_limit = step_limit
        self.name = f"GridChain-{k}"
        self._parse()
        if start_cells is None:
            start_cells = [c for c in self.floor if not any(c in z for z in self.zones)]
        self.start_cells = tuple(tuple(c) for c in start_cells)
        self._expert_paths = [self._zone_paths(i) for i in range(1, k + 1)]
        self.task = self._make_task(discount)
        self.model = self._make_model()
        self._states = None
        self._index = None
        self._obs_index = None

    # -- layout ------------------------------------------------------------
    def _parse(self):
        self.walls = set()
        self.fixtures = {}
        self.entrances = {}
        zones = {}
        self.floor = []
        for r, row in enumerate(self.layout):
            if len(row) != self.cols:
                raise ValueError("ragged layout")
            for c, ch in enumerate(row):
                if ch == "#":
                    self.walls.add((r, c))
                elif ch.isupper():
                    self.fixtures[ord(ch) - ord("A") + 1] = (r, c)
                else:
                    self.floor.append((r, c))
                    if ch.islower():
                        i = ord(ch) - ord("a") + 1
                        self.entrances[i] = (r, c)
                        zones.setdefault(i, set()).add((r, c))
                    elif ch.isdigit():
                        zones.setdefault(int(ch), set()).add((r, c))
        for i in range(1, self.k + 1):
            if i not in self.fixtures or i not in self.entrances:
                raise ValueError(f"layout lacks fixture/entrance for section {i}")
        self.zones = [frozenset(zones[i]) for i in range(1, self.k + 1)]
        self.floor_set = frozenset(self.floor)
        for i, h in enumerate(self.homes, start=1):
            for c in h:
                if c not in self.floor_set:
                    raise ValueError(f"home {c} of object {i} is not a floor cell")

    def neighbours(self, cell):
        out = []
        for a in (UP, RIGHT, DOWN, LEFT):
            dr, dc = MOVES[a]
            n = (cell[0] + dr, cell[1] + dc)
            if n in self.floor_set:
                out.append(n)
        return out

    def _zone_paths(self, i):
        """Shortest in-zone distance to the entrance and the first move, per zone cell."""
        zone, target = self.zones[i - 1], self.entrances[i]
        dist = {target: 0}
        first = {}
        frontier = deque([target])
        while frontier:
            u = frontier.popleft()
            for a in (UP, RIGHT, DOWN, LEFT):
                dr, dc = MOVES[a]
                v = (u[0] - dr, u[1] - dc)  # v --a--> u
                if v in zone and v not in dist:
                    dist[v] = dist[u] + 1
                    first[v] = a
                    frontier.append(v)
        return dist, first

    # -- predicates ----------------------------------------------------------
    def in_initial(self, s):
        return (
            isinstance(s, GridState)
            and s.inserted == 0
            and s.holding == 0
            and s.depth == 0
            and s.cell in self.start_cells
            and all(h is not None and h in self.homes[j] for j, h in enumerate(s.homes))
        )

    def _pre(self, i):
        zone = self.zones[i - 1]

        def pre(s):
            return s.inserted == i - 1 and s.holding == i and s.depth == 0 and s.cell in zone

        return pre

    def _eff(self, i):
        def eff(s):
            return s.inserted == i and s.holding == 0 and s.depth == 0

        return eff

    def _make_task(self, discount):
        sections = tuple(
            SectionSpec(i, self._pre(i), self._eff(i), self.step_limit, name=f"insert o{i}")
            for i in range(1, self.k + 1)
        )
        k = self.k
        return TaskSpec(
            domain=self.name,
            sections=sections,
            initial_set=self.in_initial,
            goal_set=lambda s: s.inserted == k,
            discount=discount,
            params={"k": k, "code_length": self.code_length, "step_limit": self.step_limit},
        )

    # -- planner model -------------------------------------------------------
    def _make_model(self):
        cells = [cell_name(c) for c in self.floor]
        objs = [f"o{i}" for i in range(1, self.k + 1)]
        static = []
        for c in self.floor:
            for n in self.neighbours(c):
                static.append(("Adj", cell_name(c), cell_name(n)))
        for i in range(1, self.k + 1):
            for c in self.homes[i - 1]:
                static.append(("HomeOf", f"o{i}", cell_name(c)))
        types = {"cell": cells, "obj": objs}
        schemas = [
            ActionSchema(
                "move",
                (("?from", "cell"), ("?to", "cell")),
                pre=(("At", "?from"), ("Adj", "?from", "?to")),
                add=(("At", "?to"),),
                delete=(("At", "?from"),),
            ),
            ActionSchema(
                "pick",
                (("?o", "obj"), ("?c", "cell")),
                pre=(("At", "?c"), ("AtHome", "?o", "?c"), ("HandEmpty",), ("Next", "?o")),
                add=(("Holding", "?o"),),
                delete=(("AtHome", "?o", "?c"), ("HandEmpty",)),
            ),
        ]
        for i in range(1, self.k + 1):
            zone_type = f"zone{i}"
            types[zone_type] = sorted(cell_name(c) for c in self.zones[i - 1])
            o = f"o{i}"
            add = [("Inserted", o), ("HandEmpty",), ("At", cell_name(self.entrances[i]))]
            if i < self.k:
                add.append(("Next", f"o{i + 1}"))
            schemas.append(
                ActionSchema(
                    f"insert_{o}",
                    (("?c", zone_type),),
                    pre=(("At", "?c"), ("Holding", o), ("Next", o)),
                    add=tuple(add),
                    delete=(("Holding", o), ("Next", o), ("At", "?c")),
                    learned=True,
                    section=i,
                )
            )
        goal = [("Inserted", f"o{self.k}")]
        return PlannerModel(self.name, schemas, types, goal, static, self.ground, self.realize)

    def ground(self, s) -> frozenset:
        facts = {("At", cell_name(s.cell))}
        facts.add(("HandEmpty",) if s.holding == 0 else ("Holding", f"o{s.holding}"))
        for j, h in enumerate(s.homes, start=1):
            if h is not None:
                facts.add(("AtHome", f"o{j}", cell_name(h)))
        for j in range(1, s.inserted + 1):
            facts.add(("Inserted", f"o{j}"))
        if s.inserted < self.k:
            facts.add(("Next", f"o{s.inserted + 1}"))
        return frozenset(facts)

    def _cell(self, name):
        r, c = name[1:].split("c")
        return (int(r), int(c))

    def realize(self, action, s):
        if action.name == "move":
            src, dst = (self._cell(x) for x in action.args)
            if s.cell != src or dst not in self.neighbours(src):
                raise PreconditionViolation(f"cannot move {src}->{dst} from {s.cell}")
            return s._replace(cell=dst)
        if action.name == "pick":
            j = int(action.args[0][1:])
            c = self._cell(action.args[1])
            if s.holding or s.cell != c or s.homes[j - 1] != c:
                raise PreconditionViolation(f"cannot pick o{j} at {c}")
            homes = list(s.homes)
            homes[j - 1] = None
            return s._replace(holding=j, homes=tuple(homes))
        raise PreconditionViolation(f"no trajectory script for {action.name}")

    # -- dynamics -------------------------------------------------------------
    def sample_initial(self, rng):
        cell = self.start_cells[rng.integers(len(self.start_cells))]
        homes = tuple(h[rng.integers(len(h))] for h in self.homes)
        return GridState(cell, 0, 0, 0, homes)

    def check_action(self, a):
        a = int(a)
        if not 0 <= a < self.n_actions:
            raise ValueError(f"action {a} out of range")
        return a

    def transition(self, s, a, section):
        """Agent-controlled step while handing off ``section``."""
        code = self.codes[section - 1]
        at_entrance = s.cell == self.entrances[section]
        if s.holding != section:
            return s
        if s.depth > 0 or (at_entrance and a == code[0]):
            if a != code[s.depth]:
                return s._replace(depth=0)  # jammed
            depth = s.depth + 1
            if depth == self.code_length:
                return s._replace(holding=0, inserted=section, depth=0)
            return s._replace(depth=depth)
        dr, dc = MOVES[a]
        n = (s.cell[0] + dr, s.cell[1] + dc)
        if n not in self.zones[section - 1]:
            return s
        return s._replace(cell=n)

    def observe_state(self, s, section):
        """Section-local observation index.

        Home cells of objects not yet picked never affect an insertion, so
        they are left out; states differing only there share an index.
        """
        if self._obs_index is None:
            self.enumerate_states()
        return self._obs_index[(s.cell, s.holding, s.inserted, s.depth)]

    def encode_state(self, s):
        return [list(s.cell), s.holding, s.inserted, s.depth, [list(h) if h else None for h in s.homes]]

    def decode_state(self, obj):
        cell, holding, inserted, depth, homes = obj
        return GridState(tuple(cell), int(holding), int(inserted), int(depth), tuple(tuple(h) if h else None for h in homes))

    # -- enumeration ------------------------------------------------------------
    def enumerate_states(self, limit=None):
        if self._states is None:
            self._states = self._build_states()
            self._index = {s: n for n, s in enumerate(self._states)}
            keys = dict.fromkeys((s.cell, s.holding, s.inserted, s.depth) for s in self._states)
            self._obs_keys = list(keys)
            self._obs_index = {key: n for n, key in enumerate(self._obs_keys)}
        return self._states

    def _build_states(self):
        out = []
        k = self.k
        for inserted in range(k + 1):
            holds = [0] + ([inserted + 1] if inserted < k else [])
            for holding in holds:
                home_opts = []
                for j in range(1, k + 1):
                    if j <= inserted or j == holding:
                        home_opts.append([None])
                    else:
                        home_opts.append(list(self.homes[j - 1]))
                for homes in itertools.product(*home_opts):
                    for cell in self.floor:
                        depths = [0]
                        if holding and cell == self.entrances[holding]:
                            depths = range(self.code_length)
                        for d in depths:
                            out.append(GridState(cell, holding, inserted, d, tuple(homes)))
        return out

    @property
    def n_states(self):
        return len(self.enumerate_states())

    @property
    def n_obs(self):
        self.enumerate_states()
        return len(self._obs_keys)

    def state_index(self, s):
        if self._index is None:
            self.enumerate_states()
        return self._index[s]

    def state_features(self, s):
        """Structured encoding: cell, holding, inserted and depth one-hots."""
        return self._key_features((s.cell, s.holding, s.inserted, s.depth))

    def _key_features(self, key):
        cell, holding, inserted, depth = key
        f = np.zeros(self.rows * self.cols + 2 * (self.k + 1) + self.code_length)
        f[cell[0] * self.cols + cell[1]] = 1.0
        o = self.rows * self.cols
        f[o + holding] = 1.0
        f[o + self.k + 1 + inserted] = 1.0
        f[o + 2 * (self.k + 1) + depth] = 1.0
        return f

    def feature_table(self):
        """Feature rows aligned with observation indices."""
        self.enumerate_states()
        return np.array([self._key_features(key) for key in self._obs_keys])

    # -- expert -----------------------------------------------------------------
    def expert_action(self, s, section):
        if s.holding != section or s.inserted != section - 1 or s.cell not in self.zones[section - 1]:
            raise OutOfCompetence(f"expert cannot handle {s!r} in section {section}")
        code = self.codes[section - 1]
        if s.depth > 0 or s.cell == self.entrances[section]:
            return code[s.depth]
        dist, first = self._expert_paths[section - 1]
        if s.cell not in first:
            raise OutOfCompetence(f"zone cell {s.cell} cannot reach the entrance")
        return first[s.cell]

    def section_distance(self, s, section):
        """Shortest number of agent steps from ``s`` to the section's effect set (BFS)."""
        eff = self.task.section(section).effect
        seen = {s: 0}
        frontier = deque([s])
        while frontier:
            u = frontier.popleft()
            if eff(u):
                return seen[u]
            for a in range(self.n_actions):
                v = self.transition(u, a, section)
                if v not in seen:
                    seen[v] = seen[u] + 1
                    frontier.append(v)
        return None

    # -- rendering --------------------------------------------------------------
    def render_ascii(self, s=None) -> str:
        s = self._state if s is None else s
        grid = [list(row) for row in self.layout]
        for r in range(self.rows):
            for c in range(self.cols):
                ch = grid[r][c]
                if ch.isdigit() or ch.islower():
                    grid[r][c] = ":"
                elif ch == ".":
                    grid[r][c] = "."
        for i, (r, c) in self.fixtures.items():
            grid[r][c] = "*" if s is not None and s.inserted >= i else chr(ord("A") + i - 1)
        for i, (r, c) in self.entrances.items():
            grid[r][c] = chr(ord("a") + i - 1)
        if s is not None:
            for j, h in enumerate(s.homes, start=1):
                if h is not None:
                    grid[h[0]][h[1]] = str(j)
            r, c = s.cell
            grid[r][c] = "@"
        lines = ["".join(row) for row in grid]
        if s is not None:
            hold = f"o{s.holding}" if s.holding else "-"
            lines.append(f"holding={hold} inserted={s.inserted} depth={s.depth}")
        return "\n".join(lines)
