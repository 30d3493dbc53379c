"""Dataset construction for Maze, MiniBehavior and FrozenLake, and
serialization of examples into the five training formats.

Examples are generated attempt by attempt from labeled random streams, so a
``(config, seed)`` pair always yields the same splits. Accepted examples fill
the train split first, then dev; the dedup key ``(layout fingerprint,
action string)`` is global, so no key can appear in both splits.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .codec import Codebook, TokenSequence, TokenVocab, tokenize_image
from .gridworld import (
    DEFAULT_SIZES,
    MAZE_LABELS,
    MOVES,
    Action,
    EnvState,
    GridSpec,
    LakeEnv,
    MazeEnv,
    MutationInfeasibleError,
    Outcome,
    PrinterEnv,
    Task,
    classify_outcome,
    env_from_dict,
    env_to_dict,
    fingerprint,
    generate_maze,
    lake_rollout,
    mutate_printer_layout,
    option_letter,
    outcome_from_letter,
    plan_printer,
    qlearn_lake,
    random_lake_env,
    random_printer_env,
    replay,
    solve_maze,
)
from .raster import TileImage, render
from .rng import derive_seed, stream
from . import templates as T


class Variant(str, Enum):
    DIRECT = "Direct"
    COT_LAYOUT = "CoTLayout"
    COT_NO_LAYOUT = "CoTNoLayout"
    INTERLEAVED = "Interleaved"
    MVOT = "MVoT"


class DatasetExhaustedError(RuntimeError):
    def __init__(self, message: str, counts: dict):
        super().__init__(message)
        self.counts = counts


# proportions of the option letters in the reference train splits
REFERENCE_PROPORTIONS = {
    Task.MAZE: None,
    Task.MINIBEHAVIOR: (3321 / 6400, 1092 / 6400, 1456 / 6400, 531 / 6400),
    Task.FROZENLAKE: (3043 / 6846, 2377 / 6846, 1426 / 6846),
}


@dataclass(frozen=True)
class Example:
    task: Task
    size: int
    seed: int
    env0: EnvState
    actions: tuple[Action, ...]
    gold: Outcome

    @property
    def answer(self) -> str:
        return option_letter(self.task, self.gold)

    @property
    def options(self) -> list[str]:
        return list(T.OPTIONS[self.task])

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.env0)

    @property
    def key(self) -> tuple[str, str]:
        return self.fingerprint, " ".join(a.value for a in self.actions)

    def states(self) -> list[EnvState]:
        return replay(self.env0, self.actions)[0]

    def trace(self) -> list[tuple[str, TileImage]]:
        """``(verbal step, oracle image after the step)`` for every action."""
        states = self.states()
        return [(_verbal(self.task, a, s), render(s)) for a, s in zip(self.actions, states[1:])]

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "grid_size": self.size,
            "seed": self.seed,
            "env": env_to_dict(self.env0),
            "actions": [a.value for a in self.actions],
            "gold": self.gold.value,
            "answer": self.answer,
            "env_fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Example":
        return cls(
            Task(d["task"]),
            d["grid_size"],
            d["seed"],
            env_from_dict(d["env"]),
            tuple(Action(a) for a in d["actions"]),
            Outcome(d["gold"]),
        )


def _verbal(task: Task, action: Action, after: EnvState) -> str:
    text = T.ACTION_TEXT[action]
    if task is Task.MINIBEHAVIOR:
        text += " " + T.carrying(after.carrying)
    return text


# ---------------------------------------------------------------- formatting


def _image_ids(img: TileImage, vocab: TokenVocab, cb: Codebook) -> list[int]:
    return [vocab.BOI] + [vocab.image_id(i) for i in tokenize_image(img, cb)] + [vocab.EOI]


class _Builder:
    def __init__(self, vocab: TokenVocab, cb: Codebook):
        self.vocab, self.cb = vocab, cb
        self.ids: list[int] = []
        self.mask: list[int] = []
        self.spans: list[tuple[int, int, str]] = []

    def _push(self, ids: list[int], supervised: bool, modality: str) -> None:
        if not ids:
            return
        start = len(self.ids)
        self.ids += ids
        self.mask += [int(supervised)] * len(ids)
        if self.spans and self.spans[-1][2] == modality == "text":
            s, _, m = self.spans.pop()
            self.spans.append((s, len(self.ids), m))
        else:
            self.spans.append((start, len(self.ids), modality))

    def text(self, s: str, supervised: bool) -> None:
        self._push(self.vocab.encode_text(s), supervised, "text")

    def special(self, token: int, supervised: bool) -> None:
        self._push([token], supervised, "text")

    def image(self, img: TileImage, supervised: bool) -> None:
        self._push(_image_ids(img, self.vocab, self.cb), supervised, "image")

    def build(self) -> TokenSequence:
        return TokenSequence(self.ids, self.mask, self.spans)


def _layout_text(ex: Example) -> str:
    env = ex.env0
    if isinstance(env, MazeEnv):
        dests = " ".join(f"{label} Coordinate: {T.coord(c)}." for label, c in env.destinations)
        return f"Destination Coordinates: {dests}"
    if isinstance(env, PrinterEnv):
        table = sorted(env.table)
        return (
            f"Initial Environment Layout: Printer Initial Coordinate: {T.coord(env.printer)}. "
            f"Table Coordinates: {T.coord_list(table)}."
        )
    holes = sorted(env.holes, key=lambda c: (c[1], c[0]))
    return (
        f"Initial Environment Layout: Holes Coordinate: {T.coord_list(holes)}. "
        f"Gift Coordinate: {T.coord(env.gift)}."
    )


def _cot_text(ex: Example, with_layout: bool) -> str:
    states = ex.states()
    parts = []
    if isinstance(ex.env0, MazeEnv) and with_layout:
        parts.append(_layout_text(ex))
    parts.append(f"Initial Agent Coordinate: {T.coord(ex.env0.agent)}.")
    if not isinstance(ex.env0, MazeEnv) and with_layout:
        parts.append(_layout_text(ex))
    for a, s in zip(ex.actions, states[1:]):
        step = f"{T.ACTION_TEXT[a]} Agent Coordinate: {T.coord(s.agent)}."
        if ex.task is Task.MINIBEHAVIOR:
            step += " " + T.carrying(s.carrying)
        parts.append(step)
    parts.append(T.FINISHED[ex.task])
    parts.append(T.answer(ex.answer))
    return " ".join(parts)


def prompt_sequence(ex: Example, vocab: TokenVocab, cb: Codebook) -> TokenSequence:
    b = _Builder(vocab, cb)
    b.special(vocab.BOS, False)
    for chunk in T.prompt_parts(ex.task, ex.actions):
        if chunk == T.IMAGE:
            b.image(render(ex.env0), False)
        else:
            b.text(chunk, False)
    return b.build()


def format_example(ex: Example, variant: Variant, vocab: TokenVocab, cb: Codebook) -> TokenSequence:
    """Serialize ``ex``; prompt tokens are never supervised."""
    variant = Variant(variant)
    b = _Builder(vocab, cb)
    prompt = prompt_sequence(ex, vocab, cb)
    b.ids, b.mask, b.spans = list(prompt.ids), list(prompt.loss_mask), list(prompt.spans)
    if variant is Variant.DIRECT:
        b.text(T.answer(ex.answer), True)
    elif variant in (Variant.COT_LAYOUT, Variant.COT_NO_LAYOUT):
        b.text(_cot_text(ex, variant is Variant.COT_LAYOUT), True)
    else:
        image_loss = variant is Variant.MVOT
        for verbal, img in ex.trace():
            b.text(verbal, True)
            b.image(img, image_loss)
        b.text(T.FINISHED[ex.task] + " " + T.answer(ex.answer), True)
    b.special(vocab.EOS, True)
    return b.build()


# ---------------------------------------------------------------- building


@dataclass
class DatasetConfig:
    task: Task
    sizes: tuple[int, ...] | None = None
    n_train: int = 2000
    n_dev: int = 500
    seed: int = 0
    proportions: tuple[float, ...] | None | str = "reference"
    max_attempts: int | None = None
    qlearn_episodes: int = 300
    hole_prob: float = 0.25
    paths_per_lake: int = 3

    def __post_init__(self):
        self.task = Task(self.task)
        if self.sizes is None:
            self.sizes = DEFAULT_SIZES[self.task]
        self.sizes = tuple(int(s) for s in self.sizes)
        for s in self.sizes:
            GridSpec(self.task, s, 0).validate()
        if self.proportions == "reference":
            self.proportions = REFERENCE_PROPORTIONS[self.task]

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "sizes": list(self.sizes),
            "n_train": self.n_train,
            "n_dev": self.n_dev,
            "seed": self.seed,
            "proportions": None if self.proportions is None else list(self.proportions),
            "max_attempts": self.max_attempts,
            "qlearn_episodes": self.qlearn_episodes,
            "hole_prob": self.hole_prob,
            "paths_per_lake": self.paths_per_lake,
        }


def _quotas(total: int, proportions: Sequence[float] | None, n_labels: int) -> list[int] | None:
    if proportions is None:
        return None
    p = np.asarray(proportions, dtype=float)
    p = p / p.sum()
    raw = p * total
    q = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - q), kind="stable")[: total - q.sum()]:
        q[i] += 1
    return q.tolist() + [0] * (n_labels - len(q))


class _Assembler:
    """Routes accepted examples into train then dev, enforcing dedup and
    per-split label quotas."""

    def __init__(self, cfg: DatasetConfig):
        self.cfg = cfg
        self.labels = [option_letter(cfg.task, o) for o in _outcomes(cfg.task)]
        self.splits: list[list[Example]] = [[], []]
        self.targets = [cfg.n_train, cfg.n_dev]
        self.quotas = [_quotas(n, cfg.proportions, len(self.labels)) for n in self.targets]
        self.seen: set[tuple[str, str]] = set()

    @property
    def current(self) -> int:
        return 0 if len(self.splits[0]) < self.targets[0] else 1

    @property
    def done(self) -> bool:
        return len(self.splits[1]) >= self.targets[1] and len(self.splits[0]) >= self.targets[0]

    def open(self, outcome: Outcome) -> bool:
        q = self.quotas[self.current]
        if q is None:
            return True
        i = self.labels.index(option_letter(self.cfg.task, outcome))
        taken = sum(1 for e in self.splits[self.current] if e.gold == outcome)
        return taken < q[i]

    def offer(self, ex: Example) -> bool:
        if self.done or ex.key in self.seen or not self.open(ex.gold):
            return False
        self.seen.add(ex.key)
        self.splits[self.current].append(ex)
        return True

    def counts(self) -> dict:
        return {
            "train": len(self.splits[0]),
            "dev": len(self.splits[1]),
            "labels": {
                name: dict(Counter(e.answer for e in split)) for name, split in zip(("train", "dev"), self.splits)
            },
        }


def _outcomes(task: Task) -> tuple[Outcome, ...]:
    from .gridworld import OUTCOMES

    return OUTCOMES[task]


def _maze_candidates(cfg: DatasetConfig, attempt: int) -> Iterator[Example]:
    rng = stream(cfg.seed, "maze", "attempt", attempt)
    size = cfg.sizes[int(rng.integers(len(cfg.sizes)))]
    seed = derive_seed(cfg.seed, "maze", "env", attempt)
    env = generate_maze(GridSpec(Task.MAZE, size, seed))
    label = MAZE_LABELS[int(rng.integers(4))]
    actions = tuple(solve_maze(env, env.destination(label)))
    yield Example(Task.MAZE, size, seed, env, actions, classify_outcome(env, actions))


def _printer_candidates(cfg: DatasetConfig, attempt: int, asm: _Assembler) -> Iterator[Example]:
    rng = stream(cfg.seed, "printer", "attempt", attempt)
    size = cfg.sizes[int(rng.integers(len(cfg.sizes)))]
    seed = derive_seed(cfg.seed, "printer", "env", attempt)
    env = random_printer_env(GridSpec(Task.MINIBEHAVIOR, size, seed))
    actions = tuple(plan_printer(env, seed))
    fresh = Example(Task.MINIBEHAVIOR, size, seed, env, actions, classify_outcome(env, actions))
    if fresh.key not in asm.seen and asm.open(fresh.gold):
        yield fresh
        return
    # re-seen sequence or success quota exhausted: perturb the layout and re-derive
    try:
        mutated = mutate_printer_layout(env, derive_seed(seed, "mutation"))
    except MutationInfeasibleError:
        return
    yield Example(Task.MINIBEHAVIOR, size, seed, mutated, actions, classify_outcome(mutated, actions))


def _lake_candidates(cfg: DatasetConfig, attempt: int) -> Iterator[Example]:
    rng = stream(cfg.seed, "lake", "attempt", attempt)
    size = cfg.sizes[int(rng.integers(len(cfg.sizes)))]
    seed = derive_seed(cfg.seed, "lake", "env", attempt)
    env = random_lake_env(GridSpec(Task.FROZENLAKE, size, seed), cfg.hole_prob)
    q = qlearn_lake(env, cfg.qlearn_episodes, seed)
    for k in range(cfg.paths_per_lake):
        # first path greedy, the rest sampled around the Q-table for variety
        actions = lake_rollout(env, q, epsilon=0.0 if k == 0 else 0.3, rng=rng)
        outcome = classify_outcome(env, actions)
        if outcome is Outcome.FELL_IN_HOLE and rng.random() < 0.5:
            actions += [MOVES[int(i)] for i in rng.integers(4, size=int(rng.integers(1, 4)))]
        elif outcome is Outcome.SUCCESS and len(actions) > 1 and rng.random() < 0.4:
            actions = actions[: int(rng.integers(1, len(actions)))]
        actions = tuple(actions)
        yield Example(Task.FROZENLAKE, size, seed, env, actions, classify_outcome(env, actions))


def build_dataset(cfg: DatasetConfig) -> tuple[list[Example], list[Example]]:
    asm = _Assembler(cfg)
    limit = cfg.max_attempts or 50 * (cfg.n_train + cfg.n_dev) + 1000
    attempt = 0
    while not asm.done:
        if attempt >= limit:
            c = asm.counts()
            raise DatasetExhaustedError(
                f"{cfg.task.value}: only {c['train']}/{cfg.n_train} train and "
                f"{c['dev']}/{cfg.n_dev} dev examples after {attempt} attempts",
                c,
            )
        if cfg.task is Task.MAZE:
            cands = _maze_candidates(cfg, attempt)
        elif cfg.task is Task.MINIBEHAVIOR:
            cands = _printer_candidates(cfg, attempt, asm)
        else:
            cands = _lake_candidates(cfg, attempt)
        for ex in cands:
            asm.offer(ex)
        attempt += 1
    return asm.splits[0], asm.splits[1]


def build_maze_dataset(cfg: DatasetConfig) -> tuple[list[Example], list[Example]]:
    return build_dataset(cfg)


def build_printer_dataset(cfg: DatasetConfig) -> tuple[list[Example], list[Example]]:
    return build_dataset(cfg)


def build_lake_dataset(cfg: DatasetConfig) -> tuple[list[Example], list[Example]]:
    return build_dataset(cfg)


# ---------------------------------------------------------------- statistics


def entity_count(env: EnvState) -> int:
    if isinstance(env, MazeEnv):
        return 1 + len(env.destinations)
    if isinstance(env, PrinterEnv):
        return 1 + (env.printer is not None) + bool(env.table)
    return 2 + len(env.holes)


@dataclass
class SplitStats:
    size: int
    label_counts: dict[str, int]
    size_counts: dict[int, int]
    mean_action_length: float
    mean_entity_count: float
    mean_entities_by_size: dict[int, float] = field(default_factory=dict)
    mean_holes_by_size: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "label_counts": self.label_counts,
            "size_counts": {str(k): v for k, v in self.size_counts.items()},
            "mean_action_length": self.mean_action_length,
            "mean_entity_count": self.mean_entity_count,
            "mean_entities_by_size": {str(k): v for k, v in self.mean_entities_by_size.items()},
            "mean_holes_by_size": {str(k): v for k, v in self.mean_holes_by_size.items()},
        }


def stats(split: Sequence[Example]) -> SplitStats:
    if not split:
        raise ValueError("empty split")
    labels = Counter(e.answer for e in split)
    sizes = Counter(e.size for e in split)
    by_size: dict[int, list[Example]] = {}
    for e in split:
        by_size.setdefault(e.size, []).append(e)
    holes = {
        s: float(np.mean([len(e.env0.holes) for e in es]))
        for s, es in sorted(by_size.items())
        if isinstance(es[0].env0, LakeEnv)
    }
    return SplitStats(
        size=len(split),
        label_counts=dict(sorted(labels.items())),
        size_counts=dict(sorted(sizes.items())),
        mean_action_length=float(np.mean([len(e.actions) for e in split])),
        mean_entity_count=float(np.mean([entity_count(e.env0) for e in split])),
        mean_entities_by_size={s: float(np.mean([entity_count(e.env0) for e in es])) for s, es in sorted(by_size.items())},
        mean_holes_by_size=holes,
    )


# ---------------------------------------------------------------- files


def example_record(ex: Example, variant: Variant, vocab: TokenVocab, cb: Codebook) -> dict:
    seq = format_example(ex, variant, vocab, cb)
    rec = ex.to_dict()
    rec.update(
        variant=Variant(variant).value,
        token_ids=seq.ids,
        loss_mask=seq.loss_mask,
        spans=[list(s) for s in seq.spans],
    )
    return rec


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def record_sequence(rec: dict) -> TokenSequence:
    return TokenSequence(list(rec["token_ids"]), list(rec["loss_mask"]), [tuple(s) for s in rec["spans"]])


__all__ = [
    "DatasetConfig",
    "DatasetExhaustedError",
    "Example",
    "SplitStats",
    "Variant",
    "build_dataset",
    "build_lake_dataset",
    "build_maze_dataset",
    "build_printer_dataset",
    "example_record",
    "format_example",
    "outcome_from_letter",
    "prompt_sequence",
    "read_jsonl",
    "record_sequence",
    "stats",
    "write_jsonl",
]
