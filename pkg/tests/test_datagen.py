from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from mvot.codec import build_vocab, detokenize, task_codebook
from mvot.datagen import (
    DatasetConfig,
    DatasetExhaustedError,
    Example,
    Variant,
    example_record,
    format_example,
    prompt_sequence,
    read_jsonl,
    record_sequence,
    stats,
    write_jsonl,
)
from mvot.gridworld import Action, LakeEnv, MazeEnv, Outcome, PrinterEnv, Task, classify_outcome, replay
from mvot.raster import render
from mvot.datagen import build_dataset


@lru_cache(maxsize=None)
def small(task: Task, n_train=300, n_dev=80, seed=0):
    return build_dataset(DatasetConfig(task, n_train=n_train, n_dev=n_dev, seed=seed))


@lru_cache(maxsize=None)
def codec(task: Task):
    cb = task_codebook(task)
    return cb, build_vocab(task, cb)


@pytest.mark.parametrize("task", list(Task))
def test_labels_rederived_by_replay(task):
    train, dev = small(task)
    for ex in train + dev:
        assert classify_outcome(ex.env0, ex.actions) == ex.gold


@pytest.mark.parametrize("task", list(Task))
def test_no_cross_split_collisions(task):
    train, dev = small(task)
    keys_train = {ex.key for ex in train}
    keys_dev = {ex.key for ex in dev}
    assert len(keys_train) == len(train) and len(keys_dev) == len(dev)
    assert not keys_train & keys_dev


def test_maze_audit_uses_wall_masks():
    train, dev = small(Task.MAZE)
    joined = {}
    for name, split in (("train", train), ("dev", dev)):
        for ex in split:
            key = (ex.env0.walls, " ".join(a.value for a in ex.actions))
            joined.setdefault(key, set()).add(name)
    assert all(len(v) == 1 for v in joined.values())


def test_printer_missing_objects_and_mutations():
    train, dev = small(Task.MINIBEHAVIOR)
    labels = {ex.gold for ex in train}
    assert labels == {Outcome.SUCCESS, Outcome.DROP_ERROR, Outcome.PICKUP_ERROR, Outcome.MISSING_OBJECTS}
    for ex in train + dev:
        if ex.gold is Outcome.MISSING_OBJECTS:
            assert ex.env0.printer is None or not ex.env0.table


def test_fell_in_hole_prefix_ends_on_hole():
    train, dev = small(Task.FROZENLAKE)
    for ex in train + dev:
        if ex.gold is Outcome.FELL_IN_HOLE:
            states = replay(ex.env0, ex.actions)[0]
            assert any(s.agent in ex.env0.holes for s in states[1:])


def test_lake_proportions_track_reference():
    train, _ = small(Task.FROZENLAKE)
    st = stats(train)
    props = np.array([st.label_counts.get(k, 0) for k in "ABC"]) / st.size
    assert np.all(np.abs(props - np.array([3043, 2377, 1426]) / 6846) <= 0.05)


def test_label_quotas_exact():
    train, dev = small(Task.MINIBEHAVIOR)
    st = stats(train)
    assert st.label_counts == {"A": 156, "B": 51, "C": 68, "D": 25}
    assert sum(st.label_counts.values()) == st.size == 300


def test_dataset_deterministic():
    a = build_dataset(DatasetConfig(Task.FROZENLAKE, n_train=40, n_dev=10, seed=5))
    b = build_dataset(DatasetConfig(Task.FROZENLAKE, n_train=40, n_dev=10, seed=5))
    assert [e.to_dict() for e in a[0] + a[1]] == [e.to_dict() for e in b[0] + b[1]]


def test_exhaustion_reports_partial_counts():
    with pytest.raises(DatasetExhaustedError) as info:
        build_dataset(DatasetConfig(Task.MAZE, sizes=(3,), n_train=30, n_dev=5, max_attempts=10))
    assert info.value.counts["train"] <= 10


def test_hole_count_grows_with_size():
    train, _ = small(Task.FROZENLAKE)
    holes = stats(train).mean_holes_by_size
    sizes = sorted(holes)
    assert sizes == [3, 4, 5, 6]
    assert all(holes[a] < holes[b] for a, b in zip(sizes, sizes[1:]))


# ---------------------------------------------------------------- formats


def _text(seq, vocab, lo=0, hi=None):
    return vocab.decode_text(seq.ids[lo:hi])


def test_direct_maze_ends_with_answer():
    train, _ = small(Task.MAZE)
    cb, v = codec(Task.MAZE)
    ex = train[0]
    seq = format_example(ex, Variant.DIRECT, v, cb)
    assert seq.ids[-1] == v.EOS
    assert _text(seq, v).endswith(f"Response: The answer is {ex.answer}.")
    assert _text(seq, v).startswith("Task: Maze Navigation Simulation")


@pytest.mark.parametrize("task", list(Task))
def test_variants_share_prompt_and_mask(task):
    train, _ = small(task)
    cb, v = codec(task)
    for ex in train[:10]:
        prompt = prompt_sequence(ex, v, cb)
        seqs = {var: format_example(ex, var, v, cb) for var in Variant}
        for seq in seqs.values():
            assert seq.ids[: len(prompt)] == prompt.ids
            assert not any(seq.loss_mask[: len(prompt)])
            assert len(seq.loss_mask) == len(seq.ids)
            covered = [i for s, e, _ in seq.spans for i in range(s, e)]
            assert covered == list(range(len(seq.ids)))
        mv, il = seqs[Variant.MVOT], seqs[Variant.INTERLEAVED]
        assert mv.ids == il.ids and mv.loss_mask != il.loss_mask
        for s, e in il.image_spans()[1:]:
            assert not any(il.loss_mask[s:e]) and all(mv.loss_mask[s:e])


@pytest.mark.parametrize("task", list(Task))
def test_image_spans_are_oracle_renders(task):
    train, _ = small(task)
    cb, v = codec(task)
    for ex in train[:20]:
        seq = format_example(ex, Variant.MVOT, v, cb)
        spans = seq.image_spans()
        assert len(spans) == len(ex.actions) + 1
        states = replay(ex.env0, ex.actions)[0]
        for (s, e), state in zip(spans, states):
            body = seq.ids[s + 1 : e - 1]
            assert seq.ids[s] == v.BOI and seq.ids[e - 1] == v.EOI
            assert len(body) == ex.size**2
            assert detokenize([v.image_index(t) for t in body], cb, ex.size, ex.size) == render(state)


def test_cot_layout_lake_matches_transcript():
    env = LakeEnv(3, (1, 1), frozenset({(1, 0), (0, 1)}), (2, 2))
    ex = Example(Task.FROZENLAKE, 3, 0, env, (Action.DOWN, Action.RIGHT), Outcome.SUCCESS)
    cb, v = codec(Task.FROZENLAKE)
    seq = format_example(ex, Variant.COT_LAYOUT, v, cb)
    text = _text(seq, v)
    assert (
        "Response: Initial Agent Coordinate: [1, 1]. Initial Environment Layout: Holes Coordinate: "
        "[[1, 0], [0, 1]]. Gift Coordinate: [2, 2]. Go down. Agent Coordinate: [1, 2]. "
        "Go right. Agent Coordinate: [2, 2]. Action sequence stopped. The answer is A."
    ) in text
    no_layout = _text(format_example(ex, Variant.COT_NO_LAYOUT, v, cb), v)
    assert "Holes Coordinate" not in no_layout and "Go right. Agent Coordinate: [2, 2]." in no_layout


def test_cot_layout_printer_and_maze():
    cb, v = codec(Task.MINIBEHAVIOR)
    env = PrinterEnv(7, (1, 1), (1, 2), frozenset({(4, 4), (5, 4)}))
    from mvot.gridworld import plan_printer

    acts = tuple(plan_printer(env, 0))
    ex = Example(Task.MINIBEHAVIOR, 7, 0, env, acts, classify_outcome(env, acts))
    text = _text(format_example(ex, Variant.COT_LAYOUT, v, cb), v)
    assert "Printer Initial Coordinate: [1, 2]. Table Coordinates: [[4, 4], [5, 4]]." in text
    assert "Pick up. Agent Coordinate: [1, 1]. Carrying objects: printer_0." in text
    train, _ = small(Task.MAZE)
    cbm, vm = codec(Task.MAZE)
    text = _text(format_example(train[0], Variant.COT_LAYOUT, vm, cbm), vm)
    assert "Destination Coordinates: A Coordinate:" in text


def test_mvot_trace_structure():
    train, _ = small(Task.MINIBEHAVIOR)
    cb, v = codec(Task.MINIBEHAVIOR)
    ex = train[0]
    trace = ex.trace()
    assert len(trace) == len(ex.actions)
    assert all("Carrying objects" in verbal for verbal, _ in trace)


def test_stats_singleton_and_sums():
    train, _ = small(Task.MAZE)
    one = stats(train[:1])
    assert one.size == 1 and one.label_counts == {train[0].answer: 1}
    assert one.size_counts == {train[0].size: 1}
    assert one.mean_action_length == len(train[0].actions)
    full = stats(train)
    assert sum(full.label_counts.values()) == sum(full.size_counts.values()) == len(train)
    with pytest.raises(ValueError):
        stats([])


def test_jsonl_round_trip(tmp_path):
    train, _ = small(Task.FROZENLAKE)
    cb, v = codec(Task.FROZENLAKE)
    recs = [example_record(e, Variant.MVOT, v, cb) for e in train[:5]]
    write_jsonl(tmp_path / "x.jsonl", recs)
    back = read_jsonl(tmp_path / "x.jsonl")
    assert back == recs
    for r, e in zip(back, train):
        assert {"task", "grid_size", "seed", "variant", "token_ids", "loss_mask", "spans", "answer", "env_fingerprint"} <= set(r)
        assert Example.from_dict(r) == e
        assert record_sequence(r).ids == format_example(e, Variant.MVOT, v, cb).ids


def test_cot_layout_lake_reference_transcript():
    env = LakeEnv(3, (1, 2), frozenset({(1, 0), (0, 1)}), (2, 1))
    ex = Example(Task.FROZENLAKE, 3, 0, env, (Action.RIGHT, Action.UP), Outcome.SUCCESS)
    cb, v = codec(Task.FROZENLAKE)
    assert classify_outcome(env, ex.actions) is Outcome.SUCCESS
    assert _text(format_example(ex, Variant.COT_LAYOUT, v, cb), v).endswith(
        "Response: Initial Agent Coordinate: [1, 2]. Initial Environment Layout: Holes Coordinate: [[1, 0], [0, 1]]. "
        "Gift Coordinate: [2, 1]. Go right. Agent Coordinate: [2, 2]. Go up. Agent Coordinate: [2, 1]. "
        "Action sequence stopped. The answer is A."
    )
