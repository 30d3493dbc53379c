"""Deterministic grid-world simulators: Maze, MiniBehavior (InstallingAPrinter)
and FrozenLake.

Coordinates are ``(x, y)`` = ``(column, row)``, zero-indexed from the top-left
corner. ``Up`` decrements ``y``. All environment states are frozen dataclasses
and :func:`step` is a pure transition, so states can be shared freely.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence, Union

import numpy as np

from .rng import stream

Cell = tuple[int, int]


class Task(str, Enum):
    MAZE = "Maze"
    MINIBEHAVIOR = "MiniBehavior"
    FROZENLAKE = "FrozenLake"


class Action(str, Enum):
    UP = "Up"
    DOWN = "Down"
    LEFT = "Left"
    RIGHT = "Right"
    PICKUP = "PickUp"
    DROP = "Drop"
    TOGGLE = "Toggle"

    @property
    def is_move(self) -> bool:
        return self in MOVES


MOVES = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)
DELTA = {Action.UP: (0, -1), Action.DOWN: (0, 1), Action.LEFT: (-1, 0), Action.RIGHT: (1, 0)}

# passage bits of the per-cell maze mask (bit set = open side)
NORTH, SOUTH, WEST, EAST = 1, 2, 4, 8
SIDE_OF = {Action.UP: NORTH, Action.DOWN: SOUTH, Action.LEFT: WEST, Action.RIGHT: EAST}
OPPOSITE = {NORTH: SOUTH, SOUTH: NORTH, WEST: EAST, EAST: WEST}


class Outcome(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    SUCCESS = "Success"
    DROP_ERROR = "DropError"
    PICKUP_ERROR = "PickUpError"
    MISSING_OBJECTS = "MissingObjects"
    FELL_IN_HOLE = "FellInHole"
    SAFE_NO_REACH = "SafeNoReach"


MAZE_LABELS = ("A", "B", "C", "D")

OUTCOMES = {
    Task.MAZE: (Outcome.A, Outcome.B, Outcome.C, Outcome.D),
    Task.MINIBEHAVIOR: (
        Outcome.SUCCESS,
        Outcome.DROP_ERROR,
        Outcome.PICKUP_ERROR,
        Outcome.MISSING_OBJECTS,
    ),
    Task.FROZENLAKE: (Outcome.SUCCESS, Outcome.FELL_IN_HOLE, Outcome.SAFE_NO_REACH),
}


def option_letter(task: Task, outcome: Outcome) -> str:
    """Multiple-choice letter under which ``outcome`` is offered for ``task``."""
    choices = OUTCOMES[Task(task)]
    if outcome not in choices:
        raise ValueError(f"outcome {outcome} is not an option of {task}")
    return "ABCD"[choices.index(outcome)]


def outcome_from_letter(task: Task, letter: str) -> Outcome:
    choices = OUTCOMES[Task(task)]
    idx = "ABCD".index(letter.upper())
    if idx >= len(choices):
        raise ValueError(f"{letter} is not an option of {task}")
    return choices[idx]


class InvalidSpecError(ValueError):
    pass


class NoMatchingOptionError(ValueError):
    """Maze replay ended on a cell that carries no destination label."""


class MutationInfeasibleError(RuntimeError):
    pass


SIZE_RANGE = {Task.MAZE: (3, 6), Task.FROZENLAKE: (3, 6), Task.MINIBEHAVIOR: (5, 10)}
# grid sizes used when building datasets; MiniBehavior uses the 7-10 range of the reference data
DEFAULT_SIZES = {Task.MAZE: (3, 4, 5, 6), Task.FROZENLAKE: (3, 4, 5, 6), Task.MINIBEHAVIOR: (7, 8, 9, 10)}


@dataclass(frozen=True)
class GridSpec:
    task: Task
    size: int
    seed: int

    def validate(self) -> "GridSpec":
        lo, hi = SIZE_RANGE[Task(self.task)]
        if not lo <= self.size <= hi:
            raise InvalidSpecError(f"{self.task} size must be in [{lo}, {hi}], got {self.size}")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpecError("seed must be a 64-bit unsigned integer")
        return self


def _in_bounds(size: int, c: Cell) -> bool:
    return 0 <= c[0] < size and 0 <= c[1] < size


def _add(c: Cell, d: tuple[int, int]) -> Cell:
    return (c[0] + d[0], c[1] + d[1])


def neighbors4(size: int, c: Cell) -> list[Cell]:
    return [n for n in (_add(c, DELTA[a]) for a in MOVES) if _in_bounds(size, n)]


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


# ---------------------------------------------------------------- env states


@dataclass(frozen=True)
class MazeEnv:
    size: int
    walls: tuple[int, ...]  # row-major passage masks
    start: Cell
    agent: Cell
    destinations: tuple[tuple[str, Cell], ...]  # sorted by label
    path_history: tuple[Cell, ...] = ()

    task = Task.MAZE

    def mask(self, c: Cell) -> int:
        return self.walls[c[1] * self.size + c[0]]

    def label_at(self, c: Cell) -> str | None:
        for label, cell in self.destinations:
            if cell == c:
                return label
        return None

    def destination(self, label: str) -> Cell:
        return dict(self.destinations)[label]

    def passages(self) -> set[frozenset[Cell]]:
        edges = set()
        for y in range(self.size):
            for x in range(self.size):
                m = self.mask((x, y))
                if m & EAST:
                    edges.add(frozenset({(x, y), (x + 1, y)}))
                if m & SOUTH:
                    edges.add(frozenset({(x, y), (x, y + 1)}))
        return edges


@dataclass(frozen=True)
class PrinterEnv:
    size: int
    agent: Cell
    printer: Cell | None
    table: frozenset[Cell]
    carrying: bool = False
    toggled: bool = False

    task = Task.MINIBEHAVIOR

    @property
    def printer_on_table(self) -> bool:
        return self.printer is not None and self.printer in self.table


@dataclass(frozen=True)
class LakeEnv:
    size: int
    agent: Cell
    holes: frozenset[Cell]
    gift: Cell

    task = Task.FROZENLAKE

    @property
    def in_hole(self) -> bool:
        return self.agent in self.holes


EnvState = Union[MazeEnv, PrinterEnv, LakeEnv]


@dataclass(frozen=True)
class StepEffect:
    moved: bool = False
    blocked: bool = False
    picked: bool = False
    dropped: bool = False
    toggled: bool = False
    fell: bool = False
    reached: bool = False
    failed: bool = False  # an interaction (PickUp/Drop/Toggle) did not apply
    cells: frozenset[Cell] = field(default_factory=frozenset)  # cells whose state may change


# ---------------------------------------------------------------- maze


def generate_maze(spec: GridSpec) -> MazeEnv:
    """Randomized iterative depth-first-search maze with a start cell and four
    labeled destinations (all distinct, none on the start)."""
    if Task(spec.task) is not Task.MAZE:
        raise InvalidSpecError("generate_maze needs a Maze spec")
    spec.validate()
    n = spec.size
    rng = stream(spec.seed, "maze", n)
    walls = [0] * (n * n)
    root = (int(rng.integers(n)), int(rng.integers(n)))
    visited = {root}
    stack = [root]
    while stack:
        cur = stack[-1]
        options = [a for a in MOVES if _in_bounds(n, _add(cur, DELTA[a])) and _add(cur, DELTA[a]) not in visited]
        if not options:
            stack.pop()
            continue
        a = options[int(rng.integers(len(options)))]
        nxt = _add(cur, DELTA[a])
        walls[cur[1] * n + cur[0]] |= SIDE_OF[a]
        walls[nxt[1] * n + nxt[0]] |= OPPOSITE[SIDE_OF[a]]
        visited.add(nxt)
        stack.append(nxt)

    cells = rng.permutation(n * n)[:5]
    start = (int(cells[0]) % n, int(cells[0]) // n)
    dests = tuple(sorted((MAZE_LABELS[i], (int(c) % n, int(c) // n)) for i, c in enumerate(cells[1:])))
    return MazeEnv(n, tuple(walls), start, start, dests, (start,))


def solve_maze(env: MazeEnv, target: Cell) -> list[Action]:
    """Shortest (in a tree: unique) action sequence from the agent to ``target``."""
    prev: dict[Cell, tuple[Cell, Action] | None] = {env.agent: None}
    queue = deque([env.agent])
    while queue:
        cur = queue.popleft()
        if cur == target:
            break
        for a in MOVES:
            if env.mask(cur) & SIDE_OF[a]:
                nxt = _add(cur, DELTA[a])
                if nxt not in prev:
                    prev[nxt] = (cur, a)
                    queue.append(nxt)
    if target not in prev:
        raise ValueError(f"{target} unreachable")
    actions = []
    cur = target
    while prev[cur] is not None:
        cur, a = prev[cur]
        actions.append(a)
    return actions[::-1]


def _step_maze(env: MazeEnv, action: Action) -> tuple[MazeEnv, StepEffect]:
    if env.mask(env.agent) & SIDE_OF[action]:
        nxt = _add(env.agent, DELTA[action])
        new = replace(env, agent=nxt, path_history=env.path_history + (nxt,))
        return new, StepEffect(moved=True, cells=frozenset({env.agent, nxt}))
    return env, StepEffect(blocked=True, cells=frozenset({env.agent}))


# ---------------------------------------------------------------- printer


def _printer_blocked(env: PrinterEnv, c: Cell) -> bool:
    return not _in_bounds(env.size, c) or c in env.table or c == env.printer


def _step_printer(env: PrinterEnv, action: Action) -> tuple[PrinterEnv, StepEffect]:
    here = frozenset({env.agent})
    if action.is_move:
        nxt = _add(env.agent, DELTA[action])
        if _printer_blocked(env, nxt):
            return env, StepEffect(blocked=True, cells=here)
        return replace(env, agent=nxt), StepEffect(moved=True, cells=frozenset({env.agent, nxt}))
    if action is Action.PICKUP:
        p = env.printer
        if env.carrying or p is None or p in env.table or manhattan(p, env.agent) != 1:
            return env, StepEffect(failed=True, cells=here)
        return replace(env, printer=None, carrying=True), StepEffect(picked=True, cells=here | {p})
    if action is Action.DROP:
        if env.carrying:
            for a in MOVES:
                c = _add(env.agent, DELTA[a])
                if c in env.table:
                    new = replace(env, printer=c, carrying=False)
                    return new, StepEffect(dropped=True, cells=here | {c})
        return env, StepEffect(failed=True, cells=here)
    if action is Action.TOGGLE:
        if env.printer_on_table and manhattan(env.printer, env.agent) == 1:
            return replace(env, toggled=True), StepEffect(toggled=True, cells=here | {env.printer})
        return env, StepEffect(failed=True, cells=here)
    raise ValueError(action)


def plan_printer(env: PrinterEnv, seed: int) -> list[Action]:
    """A shortest successful pick-carry-drop-toggle sequence, ties broken by
    ``seed``. Raises ValueError when the task is unsolvable."""
    rng = stream(seed, "plan_printer")
    if env.printer is None or not env.table or env.printer_on_table:
        raise ValueError("printer layout is not installable")

    def walk(src: Cell, goals: set[Cell], blocked_by_printer: Cell | None) -> list[Action]:
        order = [MOVES[i] for i in rng.permutation(4)]
        prev: dict[Cell, tuple[Cell, Action] | None] = {src: None}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            if cur in goals:
                out = []
                while prev[cur] is not None:
                    cur, a = prev[cur]
                    out.append(a)
                return out[::-1]
            for a in order:
                nxt = _add(cur, DELTA[a])
                if (
                    _in_bounds(env.size, nxt)
                    and nxt not in env.table
                    and nxt != blocked_by_printer
                    and nxt not in prev
                ):
                    prev[nxt] = (cur, a)
                    queue.append(nxt)
        raise ValueError("goal unreachable")

    pick_spots = {c for c in neighbors4(env.size, env.printer) if c not in env.table}
    actions = walk(env.agent, pick_spots, env.printer)
    state = env
    for a in actions:
        state, _ = step(state, a)
    state, eff = step(state, Action.PICKUP)
    assert eff.picked
    actions.append(Action.PICKUP)
    drop_spots = {n for t in env.table for n in neighbors4(env.size, t) if n not in env.table}
    tail = walk(state.agent, drop_spots, None)
    actions += tail + [Action.DROP, Action.TOGGLE]
    return actions


def mutate_printer_layout(env: PrinterEnv, seed: int) -> PrinterEnv:
    """Perturb the initial layout: 40% relocate the printer, 40% relocate the
    table, 20% remove one of the two (uniformly)."""
    rng = stream(seed, "mutate_printer")
    u = float(rng.random())
    n = env.size
    occupied_by_table = set(env.table)
    if u < 0.4:
        free = [
            (x, y)
            for y in range(n)
            for x in range(n)
            if (x, y) != env.agent and (x, y) not in occupied_by_table and (x, y) != env.printer
        ]
        if env.printer is None or not free:
            raise MutationInfeasibleError("no free cell for the printer")
        return replace(env, printer=free[int(rng.integers(len(free)))])
    if u < 0.8:
        if not env.table:
            raise MutationInfeasibleError("no table to relocate")
        xs = [c[0] for c in env.table]
        ys = [c[1] for c in env.table]
        w, h = max(xs) - min(xs) + 1, max(ys) - min(ys) + 1
        spots = []
        for y0 in range(n - h + 1):
            for x0 in range(n - w + 1):
                if (x0, y0) == (min(xs), min(ys)):
                    continue
                rect = {(x0 + i, y0 + j) for i in range(w) for j in range(h)}
                if env.agent in rect or (env.printer is not None and env.printer in rect):
                    continue
                spots.append(frozenset(rect))
        if not spots:
            raise MutationInfeasibleError("no free placement for the table")
        return replace(env, table=spots[int(rng.integers(len(spots)))])
    if rng.random() < 0.5:
        return replace(env, printer=None)
    return replace(env, table=frozenset())


def random_printer_env(spec: GridSpec) -> PrinterEnv:
    if Task(spec.task) is not Task.MINIBEHAVIOR:
        raise InvalidSpecError("random_printer_env needs a MiniBehavior spec")
    spec.validate()
    n = spec.size
    rng = stream(spec.seed, "printer_env", n)
    while True:
        w, h = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        if w * h < 2:
            continue
        x0, y0 = int(rng.integers(n - w + 1)), int(rng.integers(n - h + 1))
        table = frozenset((x0 + i, y0 + j) for i in range(w) for j in range(h))
        free = [(x, y) for y in range(n) for x in range(n) if (x, y) not in table]
        i, j = rng.choice(len(free), size=2, replace=False)
        env = PrinterEnv(n, free[int(i)], free[int(j)], table)
        try:
            plan_printer(env, spec.seed)
        except ValueError:
            continue
        return env


# ---------------------------------------------------------------- frozen lake


def _step_lake(env: LakeEnv, action: Action) -> tuple[LakeEnv, StepEffect]:
    if env.in_hole:
        return env, StepEffect(blocked=True, cells=frozenset({env.agent}))
    nxt = _add(env.agent, DELTA[action])
    if not _in_bounds(env.size, nxt):
        return env, StepEffect(blocked=True, cells=frozenset({env.agent}))
    new = replace(env, agent=nxt)
    eff = StepEffect(
        moved=True,
        fell=nxt in env.holes,
        reached=nxt == env.gift,
        cells=frozenset({env.agent, nxt}),
    )
    return new, eff


def random_lake_env(spec: GridSpec, hole_prob: float = 0.25) -> LakeEnv:
    if Task(spec.task) is not Task.FROZENLAKE:
        raise InvalidSpecError("random_lake_env needs a FrozenLake spec")
    spec.validate()
    n = spec.size
    rng = stream(spec.seed, "lake_env", n)
    cells = [(x, y) for y in range(n) for x in range(n)]
    i, j = rng.choice(n * n, size=2, replace=False)
    agent, gift = cells[int(i)], cells[int(j)]
    holes = frozenset(c for c in cells if c not in (agent, gift) and rng.random() < hole_prob)
    return LakeEnv(n, agent, holes, gift)


# ---------------------------------------------------------------- shared API


def step(env: EnvState, action: Action) -> tuple[EnvState, StepEffect]:
    """Pure transition. Invalid moves/interactions are reported in the effect."""
    action = Action(action)
    if isinstance(env, MazeEnv):
        if not action.is_move:
            raise ValueError(f"{action} is not valid for Maze")
        return _step_maze(env, action)
    if isinstance(env, LakeEnv):
        if not action.is_move:
            raise ValueError(f"{action} is not valid for FrozenLake")
        return _step_lake(env, action)
    if isinstance(env, PrinterEnv):
        return _step_printer(env, action)
    raise TypeError(type(env))


def replay(env: EnvState, actions: Iterable[Action]) -> tuple[list[EnvState], list[StepEffect]]:
    """States ``s_0..s_n`` and effects ``e_1..e_n`` of following ``actions``."""
    states, effects = [env], []
    for a in actions:
        env, eff = step(env, a)
        states.append(env)
        effects.append(eff)
    return states, effects


def classify_outcome(env0: EnvState, actions: Sequence[Action]) -> Outcome:
    if not actions:
        raise ValueError("actions must be nonempty")
    if isinstance(env0, LakeEnv):
        env = env0
        for a in actions:
            env, eff = step(env, a)
            if eff.fell:
                return Outcome.FELL_IN_HOLE
        return Outcome.SUCCESS if env.agent == env.gift else Outcome.SAFE_NO_REACH
    if isinstance(env0, PrinterEnv):
        if env0.printer is None or not env0.table:
            return Outcome.MISSING_OBJECTS
        env = env0
        picked = False
        for a in actions:
            env, eff = step(env, a)
            picked |= eff.picked
            if eff.failed:
                return Outcome.PICKUP_ERROR if a is Action.PICKUP else Outcome.DROP_ERROR
        if env.toggled:
            return Outcome.SUCCESS
        return Outcome.DROP_ERROR if picked else Outcome.PICKUP_ERROR
    if isinstance(env0, MazeEnv):
        env = env0
        for a in actions:
            env, _ = step(env, a)
        label = env.label_at(env.agent)
        if label is None:
            raise NoMatchingOptionError(f"replay ends on unlabeled cell {env.agent}")
        return Outcome(label)
    raise TypeError(type(env0))


# ---------------------------------------------------------------- Q-learning

ALPHA, GAMMA, EPSILON = 0.1, 0.95, 0.2


def _lake_index(env: LakeEnv, c: Cell) -> int:
    return c[1] * env.size + c[0]


def qlearn_lake(
    env0: LakeEnv,
    episodes: int,
    seed: int,
    alpha: float = ALPHA,
    gamma: float = GAMMA,
    epsilon: float = EPSILON,
    max_steps: int | None = None,
) -> np.ndarray:
    """Tabular Q-learning; returns a ``(size*size, 4)`` table over ``MOVES``.

    Reward is +1 on reaching the gift and -1 on falling in a hole; both end
    the episode.
    """
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    rng = stream(seed, "qlearn")
    n = env0.size
    # the MDP is deterministic: tabulate transitions once
    nxt, rew, done = [], [], []
    for y in range(n):
        for x in range(n):
            row = []
            for a in MOVES:
                env, eff = step(replace(env0, agent=(x, y)), a)
                row.append((_lake_index(env, env.agent), 1.0 if eff.reached else (-1.0 if eff.fell else 0.0), eff.fell or eff.reached))
            nxt.append([r[0] for r in row])
            rew.append([r[1] for r in row])
            done.append([r[2] for r in row])
    q = [[0.0] * 4 for _ in range(n * n)]
    max_steps = max_steps or 4 * n * n
    s0 = _lake_index(env0, env0.agent)
    for _ in range(episodes):
        s = s0
        for _ in range(max_steps):
            qs = q[s]
            if rng.random() < epsilon:
                a = int(rng.integers(4))
            else:
                m = max(qs)
                best = [i for i in range(4) if qs[i] == m]
                a = best[int(rng.integers(len(best)))] if len(best) > 1 else best[0]
            s2, r, d = nxt[s][a], rew[s][a], done[s][a]
            target = r if d else r + gamma * max(q[s2])
            qs[a] += alpha * (target - qs[a])
            if d:
                break
            s = s2
    q = np.array(q)
    return q


def lake_rollout(
    env0: LakeEnv,
    q: np.ndarray,
    max_steps: int | None = None,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[Action]:
    """Follow the Q-table (greedy when ``epsilon`` is 0) until the episode ends."""
    env = env0
    out: list[Action] = []
    for _ in range(max_steps or 2 * env0.size * env0.size):
        s = _lake_index(env, env.agent)
        if epsilon and rng is not None and rng.random() < epsilon:
            a = int(rng.integers(4))
        else:
            a = int(np.argmax(q[s]))
        out.append(MOVES[a])
        env, eff = step(env, MOVES[a])
        if eff.fell or eff.reached:
            break
    return out


# ---------------------------------------------------------------- serialization


def env_to_dict(env: EnvState) -> dict:
    if isinstance(env, MazeEnv):
        return {
            "task": Task.MAZE.value,
            "size": env.size,
            "walls": list(env.walls),
            "start": list(env.start),
            "agent": list(env.agent),
            "destinations": {k: list(v) for k, v in env.destinations},
            "path_history": [list(c) for c in env.path_history],
        }
    if isinstance(env, PrinterEnv):
        return {
            "task": Task.MINIBEHAVIOR.value,
            "size": env.size,
            "agent": list(env.agent),
            "printer": None if env.printer is None else list(env.printer),
            "table": sorted(list(c) for c in env.table),
            "carrying": env.carrying,
            "toggled": env.toggled,
        }
    if isinstance(env, LakeEnv):
        return {
            "task": Task.FROZENLAKE.value,
            "size": env.size,
            "agent": list(env.agent),
            "holes": sorted(list(c) for c in env.holes),
            "gift": list(env.gift),
        }
    raise TypeError(type(env))


def env_from_dict(d: dict) -> EnvState:
    task = Task(d["task"])
    cell = lambda v: (int(v[0]), int(v[1]))  # noqa: E731
    if task is Task.MAZE:
        return MazeEnv(
            d["size"],
            tuple(d["walls"]),
            cell(d["start"]),
            cell(d["agent"]),
            tuple(sorted((k, cell(v)) for k, v in d["destinations"].items())),
            tuple(cell(c) for c in d["path_history"]),
        )
    if task is Task.MINIBEHAVIOR:
        return PrinterEnv(
            d["size"],
            cell(d["agent"]),
            None if d["printer"] is None else cell(d["printer"]),
            frozenset(cell(c) for c in d["table"]),
            d["carrying"],
            d["toggled"],
        )
    return LakeEnv(d["size"], cell(d["agent"]), frozenset(cell(c) for c in d["holes"]), cell(d["gift"]))


def fingerprint(env: EnvState) -> str:
    """Layout fingerprint used for deduplication (maze: wall masks only)."""
    if isinstance(env, MazeEnv):
        payload = {"size": env.size, "walls": list(env.walls)}
    else:
        payload = env_to_dict(env)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()
