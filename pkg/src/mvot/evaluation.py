"""Task accuracy, visualization-quality metrics and the embedding-overlap
diagnostic."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datagen import Example
from .gridworld import Task, replay
from .raster import TileImage, diff_cells, render


@dataclass(frozen=True)
class VisGrade:
    correct: bool
    redundant: bool
    intended_cells: frozenset
    offending_cells: frozenset
    flagged: bool = False  # image missing or undecodable


def _check_len(*seqs) -> None:
    if len({len(s) for s in seqs}) > 1:
        raise ValueError("inputs must be aligned (equal lengths)")


def task_accuracy(preds: Sequence[str | None], golds: Sequence[str]) -> float:
    """Fraction of exact matches; a missing prediction counts as wrong."""
    _check_len(preds, golds)
    if not golds:
        return 0.0
    return sum(p is not None and p == g for p, g in zip(preds, golds)) / len(golds)


def ensemble_upperbound(preds_a: Sequence[str | None], preds_b: Sequence[str | None], golds: Sequence[str]) -> float:
    _check_len(preds_a, preds_b, golds)
    if not golds:
        return 0.0
    return sum(a == g or b == g for a, b, g in zip(preds_a, preds_b, golds)) / len(golds)


def intended_regions(ex: Example) -> list[set]:
    """Cells each action is meant to modify: cells touched by the step plus
    any cell whose oracle tile changes (e.g. the new maze arrow)."""
    states, effects = replay(ex.env0, ex.actions)
    images = [render(s) for s in states]
    return [set(eff.cells) | diff_cells(images[i], images[i + 1]) for i, eff in enumerate(effects)]


def grade_visualizations(images: Sequence[TileImage | None], ex: Example) -> list[VisGrade]:
    """One grade per action of ``ex``; images beyond the trace are ignored,
    missing ones are graded incorrect and redundant."""
    states, effects = replay(ex.env0, ex.actions)
    oracle = [render(s) for s in states]
    n = ex.size
    every = {(x, y) for y in range(n) for x in range(n)}
    out = []
    for i, eff in enumerate(effects):
        intended = set(eff.cells) | diff_cells(oracle[i], oracle[i + 1])
        img = images[i] if i < len(images) else None
        if img is None or (img.width, img.height) != (n, n):
            out.append(VisGrade(False, True, frozenset(intended), frozenset(every - intended), True))
            continue
        wrong = diff_cells(img, oracle[i + 1])
        offending = wrong - intended
        out.append(VisGrade(not (wrong & intended), bool(offending), frozenset(intended), frozenset(offending)))
    return out


@dataclass(frozen=True)
class VisMetrics:
    v_acc: float
    v_red: float
    v_steps: float
    v_ratio: float
    steps: int
    examples: int

    def to_dict(self) -> dict:
        return asdict(self)


def correct_prefix(flags: Sequence[bool], k: int | None = None) -> int:
    n = 0
    for f in flags:
        if not f:
            break
        n += 1
    return n if k is None else min(n, k)


def vis_metrics(grades: Sequence[Sequence[VisGrade]], k: int | None = None) -> VisMetrics:
    """V-Acc and V-Red are pooled over all steps; V-Steps and V-Ratio average
    the all-correct prefix (optionally capped at ``k``) over examples."""
    grades = [g for g in grades if len(g)]
    if not grades:
        raise ValueError("no graded steps")
    flat = [s for g in grades for s in g]
    prefixes = [correct_prefix([s.correct for s in g], k) for g in grades]
    return VisMetrics(
        v_acc=sum(s.correct for s in flat) / len(flat),
        v_red=sum(s.redundant for s in flat) / len(flat),
        v_steps=float(np.mean(prefixes)),
        v_ratio=float(np.mean([p / len(g) for p, g in zip(prefixes, grades)])),
        steps=len(flat),
        examples=len(grades),
    )


def breakdown_by_grid_size(sizes: Sequence[int], correct: Sequence[bool]) -> dict:
    """Accuracy per grid size plus ``overall`` (the count-weighted mean)."""
    _check_len(sizes, correct)
    table: dict = {}
    for s in sorted(set(sizes)):
        hits = [c for z, c in zip(sizes, correct) if z == s]
        table[int(s)] = {"n": len(hits), "accuracy": sum(hits) / len(hits)}
    table["overall"] = {"n": len(correct), "accuracy": (sum(correct) / len(correct)) if correct else 0.0}
    return table


def _cosine_neighbors(table: np.ndarray, k: int) -> list[set]:
    x = np.asarray(table, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms == 0, 1.0, norms)
    sim = x @ x.T
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    return [set(row[:k].tolist()) for row in order]


def embedding_overlap(table_a: np.ndarray, table_b: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    """Mean top-k cosine-neighbourhood overlap between two aligned tables
    (self excluded; ties broken by index)."""
    a, b = np.asarray(table_a), np.asarray(table_b)
    if a.shape[0] != b.shape[0]:
        raise ValueError("tables must have the same number of rows")
    n = a.shape[0]
    out = {}
    for k in ks:
        if k < 1 or k >= n:
            raise ValueError(f"k={k} must satisfy 1 <= k < N={n}")
        na, nb = _cosine_neighbors(a, k), _cosine_neighbors(b, k)
        out[int(k)] = float(np.mean([len(x & y) / k for x, y in zip(na, nb)]))
    return out


@dataclass
class EvalReport:
    accuracy: float
    vis: VisMetrics | None
    vis_frozenlake: VisMetrics | None
    by_size: dict
    counts: dict
    predictions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "V-Acc": self.vis.v_acc if self.vis else None,
            "V-Red": self.vis.v_red if self.vis else None,
            "V-Steps": self.vis.v_steps if self.vis else None,
            "V-Ratio": self.vis.v_ratio if self.vis else None,
            "frozenlake_vis": self.vis_frozenlake.to_dict() if self.vis_frozenlake else None,
            "by_grid_size": {str(k): v for k, v in self.by_size.items()},
            "counts": self.counts,
            "predictions": self.predictions,
        }


def build_report(examples: Sequence[Example], answers: Sequence[str | None], images: Sequence[Sequence] | None) -> EvalReport:
    """Aggregate predictions (and, for image-producing variants, visual
    thoughts) into a report. FrozenLake visual grades go in their own slot."""
    _check_len(examples, answers)
    golds = [ex.answer for ex in examples]
    correct = [a is not None and a == g for a, g in zip(answers, golds)]
    vis = lake = None
    flagged = 0
    if images is not None:
        _check_len(examples, images)
        grades = [grade_visualizations(im, ex) for im, ex in zip(images, examples)]
        flagged = sum(s.flagged for g in grades for s in g)
        main = [g for g, ex in zip(grades, examples) if ex.task is not Task.FROZENLAKE]
        lk = [g for g, ex in zip(grades, examples) if ex.task is Task.FROZENLAKE]
        vis = vis_metrics(main) if any(main) else None
        lake = vis_metrics(lk) if any(lk) else None
    return EvalReport(
        accuracy=task_accuracy(answers, golds),
        vis=vis,
        vis_frozenlake=lake,
        by_size=breakdown_by_grid_size([ex.size for ex in examples], correct),
        counts={
            "examples": len(examples),
            "correct": int(sum(correct)),
            "no_answer": sum(a is None for a in answers),
            "flagged_images": flagged,
        },
        predictions=[{"gold": g, "pred": a} for g, a in zip(golds, answers)],
    )


__all__ = [
    "EvalReport",
    "VisGrade",
    "VisMetrics",
    "breakdown_by_grid_size",
    "build_report",
    "correct_prefix",
    "embedding_overlap",
    "ensemble_upperbound",
    "grade_visualizations",
    "intended_regions",
    "task_accuracy",
    "vis_metrics",
]
