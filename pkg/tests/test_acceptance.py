"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line, printed in the terminal summary.
The toy-training criteria (8 and 10) share one set of runs and dominate the
wall time of the suite (roughly six 3x3-4x4 maze runs on one core).
"""

from __future__ import annotations

import itertools
import time
from dataclasses import replace
from functools import lru_cache

import numpy as np

from conftest import ACCEPTANCE
from mvot.cli import EXIT_OK, main
from mvot.codec import build_vocab, detokenize, task_codebook, tokenize_image
from mvot.datagen import DatasetConfig, Variant, build_dataset, format_example, stats
from mvot.engine import TrainConfig, TrainItem, generate_for, train
from mvot.evaluation import (
    VisGrade,
    _cosine_neighbors,
    embedding_overlap,
    ensemble_upperbound,
    grade_visualizations,
    vis_metrics,
)
from mvot.gridworld import (
    MOVES,
    Action,
    GridSpec,
    NoMatchingOptionError,
    Outcome,
    Task,
    classify_outcome,
    generate_maze,
    plan_printer,
    random_lake_env,
    random_printer_env,
    solve_maze,
)
from mvot.model import ModelConfig, TokenClasses, grad_check, init, loss, make_batch, parameter_count
from mvot.raster import TileImage, render
from mvot.rng import stream


def report(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_check():
    t0 = time.time()
    worst_all, parts = 0.0, []
    for task in Task:
        cb = task_codebook(task)
        vocab = build_vocab(task, cb)
        train_set, _ = build_dataset(DatasetConfig(task, n_train=4, n_dev=1, seed=1))
        ids, masks, sides = [], [], []
        for ex in train_set[:2]:
            seq = format_example(ex, Variant.MVOT, vocab, cb)
            s = seq.image_spans()[1][0] - 8
            ids.append([vocab.BOS] + seq.ids[s : s + 40])
            masks.append([0] + seq.loss_mask[s : s + 40])
            sides.append(ex.size)
        batch = make_batch(ids, masks, TokenClasses.of(vocab), sides=sides)
        cfg = ModelConfig(vocab.size, layers=2, heads=2, width=16, ff=32, max_len=48, max_side=10, seed=1)
        p = init(cfg, np.float64)
        p.data += stream(7, "perturb", task.value).normal(0, 0.3, p.size)
        worst, errs = grad_check(p, batch, cb.similarity, vocab.image_offset, 1.0, coords=200)
        worst_all = max(worst_all, worst)
        parts.append(f"{task.value}: {parameter_count(cfg)} params, {len(errs)} coords, max rel err {worst:.2e}")
        assert parameter_count(cfg) <= 50_000 and len(errs) >= 200
    elapsed = time.time() - t0
    report(1, worst_all < 1e-4 and elapsed < 60, "; ".join(parts) + f"; {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_discrepancy_algebra():
    rng = stream(0, "accept2")
    nonneg = zero = decrease = True
    draws = 10_000
    sims = [task_codebook(t).similarity for t in Task]
    for i in range(draws):
        S = sims[i % 3]
        n = len(S)
        label = int(rng.integers(n))
        logits = rng.normal(0, 3, size=(1, n))
        one = np.ones(1)
        t = np.array([label])
        nonneg &= loss(logits, t, one, S, 0).L_D >= 0
        hot = np.full((1, n), -1e4)
        hot[0, label] = 1e4
        zero &= loss(hot, t, one, S, 0).L_D == 0.0
        row = S[label]
        far = int(np.argmax(row))
        near = int(np.argmin(np.where(np.arange(n) == label, np.inf, row)))
        p = rng.dirichlet(np.ones(n))
        p = 0.8 * p + 0.2 * np.eye(n)[far]  # at least 0.2 on the farthest token
        q = p.copy()
        q[far] -= 0.1
        q[near] += 0.1
        before = loss(np.log(p)[None], t, one, S, 0).L_D
        after = loss(np.log(q)[None], t, one, S, 0).L_D
        decrease &= after < before
    report(2, nonneg and zero and decrease, f"{draws} draws: nonneg={nonneg} one-hot-zero={zero} mass-shift-decreases={decrease}")


# ---------------------------------------------------------------- 3


def test_criterion_3_codec_exactness():
    checked = 0
    ok = True
    for task in Task:
        cb = task_codebook(task)
        for side in (3, 6):
            for kind, pos in itertools.product(cb.kinds, range(side * side)):
                tiles = [cb.kinds[(cb.index[kind] + 1) % cb.n]] * (side * side)
                tiles[pos] = kind
                img = TileImage(side, side, tuple(tiles))
                back = detokenize(tokenize_image(img, cb), cb, side, side)
                ok &= back == img
                checked += 1
    envs = [generate_maze(GridSpec(Task.MAZE, 6, 3)), random_printer_env(GridSpec(Task.MINIBEHAVIOR, 10, 3)), random_lake_env(GridSpec(Task.FROZENLAKE, 6, 3))]
    deterministic = all(render(e).pixels.tobytes() == render(e).pixels.tobytes() for e in envs)
    report(3, ok and deterministic, f"{checked} single-tile grids round-tripped; render byte-deterministic={deterministic}")


# ---------------------------------------------------------------- 4
# Independent simulators written against plain grids, sharing no code with
# the package beyond the environment records themselves.


def oracle_maze(env, actions):
    x, y = env.agent
    bits = {Action.UP: 1, Action.DOWN: 2, Action.LEFT: 4, Action.RIGHT: 8}
    step = {Action.UP: (0, -1), Action.DOWN: (0, 1), Action.LEFT: (-1, 0), Action.RIGHT: (1, 0)}
    for a in actions:
        if env.walls[y * env.size + x] & bits[a]:
            x, y = x + step[a][0], y + step[a][1]
    labels = {cell: lab for lab, cell in env.destinations}
    return Outcome(labels[(x, y)]) if (x, y) in labels else None


def oracle_lake(env, actions):
    n = env.size
    grid = [["." for _ in range(n)] for _ in range(n)]
    for hx, hy in env.holes:
        grid[hy][hx] = "H"
    x, y = env.agent
    step = {Action.UP: (0, -1), Action.DOWN: (0, 1), Action.LEFT: (-1, 0), Action.RIGHT: (1, 0)}
    for a in actions:
        nx, ny = x + step[a][0], y + step[a][1]
        if 0 <= nx < n and 0 <= ny < n:
            x, y = nx, ny
            if grid[y][x] == "H":
                return Outcome.FELL_IN_HOLE
    return Outcome.SUCCESS if (x, y) == env.gift else Outcome.SAFE_NO_REACH


def oracle_printer(env, actions):
    if env.printer is None or not env.table:
        return Outcome.MISSING_OBJECTS
    n = env.size
    table = set(env.table)
    printer = env.printer
    carrying = toggled = picked = False
    x, y = env.agent
    step = [(Action.UP, (0, -1)), (Action.DOWN, (0, 1)), (Action.LEFT, (-1, 0)), (Action.RIGHT, (1, 0))]

    def adjacent(c):
        return c is not None and abs(c[0] - x) + abs(c[1] - y) == 1

    for a in actions:
        if a in dict(step):
            dx, dy = dict(step)[a]
            c = (x + dx, y + dy)
            if 0 <= c[0] < n and 0 <= c[1] < n and c not in table and c != printer:
                x, y = c
        elif a is Action.PICKUP:
            if carrying or printer in table or not adjacent(printer):
                return Outcome.PICKUP_ERROR
            carrying, picked, printer = True, True, None
        elif a is Action.DROP:
            spots = [(x + dx, y + dy) for _, (dx, dy) in step if (x + dx, y + dy) in table]
            if not carrying or not spots:
                return Outcome.DROP_ERROR
            carrying, printer = False, spots[0]
        elif a is Action.TOGGLE:
            if printer not in table or not adjacent(printer):
                return Outcome.DROP_ERROR
            toggled = True
    if toggled:
        return Outcome.SUCCESS
    return Outcome.DROP_ERROR if picked else Outcome.PICKUP_ERROR


def _package_label(env, actions):
    try:
        return classify_outcome(env, actions)
    except NoMatchingOptionError:
        return None


def test_criterion_4_simulator_oracle():
    rng = stream(0, "accept4")
    disagreements = {}
    seen = {}
    for task in Task:
        bad = 0
        labels = set()
        for i in range(1000):
            seed = int(rng.integers(1 << 40))
            if task is Task.MAZE:
                env = generate_maze(GridSpec(task, int(rng.integers(3, 7)), seed))
                if i % 2:
                    acts = solve_maze(env, env.destinations[int(rng.integers(4))][1]) or [MOVES[0]]
                else:
                    acts = [MOVES[int(k)] for k in rng.integers(0, 4, int(rng.integers(1, 15)))]
                want = oracle_maze(env, acts)
            elif task is Task.FROZENLAKE:
                env = random_lake_env(GridSpec(task, int(rng.integers(3, 7)), seed))
                acts = [MOVES[int(k)] for k in rng.integers(0, 4, int(rng.integers(1, 15)))]
                want = oracle_lake(env, acts)
            else:
                env = random_printer_env(GridSpec(task, int(rng.integers(5, 11)), seed))
                kind = i % 4
                if kind == 3:
                    env = replace(env, printer=None) if i % 8 == 3 else replace(env, table=frozenset())
                    acts = [Action.PICKUP]
                else:
                    acts = plan_printer(env, seed)
                    if kind == 1:
                        acts[int(rng.integers(len(acts)))] = list(Action)[int(rng.integers(7))]
                    elif kind == 2:
                        acts = [list(Action)[int(k)] for k in rng.integers(0, 7, int(rng.integers(1, 20)))]
                want = oracle_printer(env, acts)
            got = _package_label(env, acts)
            bad += got != want
            labels.add(want)
        disagreements[task.value] = bad
        seen[task.value] = len(labels)
    ok = sum(disagreements.values()) == 0
    report(4, ok, f"disagreements per 1000 pairs {disagreements}; distinct outcomes exercised {seen}")


# ---------------------------------------------------------------- 5


def test_criterion_5_dataset_soundness():
    parts, ok = [], True
    for task in Task:
        train_set, dev = build_dataset(DatasetConfig(task, n_train=2000, n_dev=500, seed=0))
        mismatches = sum(classify_outcome(ex.env0, ex.actions) != ex.gold for ex in train_set + dev)
        tk, dk = {ex.key for ex in train_set}, {ex.key for ex in dev}
        collisions = len(tk & dk) + (len(train_set) - len(tk)) + (len(dev) - len(dk))
        part = f"{task.value}: {len(train_set)}/{len(dev)} mismatches={mismatches} collisions={collisions}"
        ok &= mismatches == 0 and collisions == 0 and (len(train_set), len(dev)) == (2000, 500)
        if task is Task.FROZENLAKE:
            holes = stats(train_set).mean_holes_by_size
            sizes = sorted(holes)
            rising = all(holes[a] < holes[b] for a, b in zip(sizes, sizes[1:]))
            ok &= rising
            part += " holes by size " + ", ".join(f"{s}:{holes[s]:.2f}" for s in sizes)
        parts.append(part)
    report(5, ok, "; ".join(parts))


# ---------------------------------------------------------------- 6


def _g(ok):
    return VisGrade(ok, False, frozenset(), frozenset())


def test_criterion_6_metric_units():
    m = vis_metrics([[_g(True), _g(True), _g(True), _g(False), _g(True)]])
    fixture = (m.v_steps, m.v_ratio, m.v_acc) == (3, 0.6, 0.8)
    m7 = vis_metrics([[_g(True)] * 7])
    fixture &= (m7.v_steps, m7.v_ratio, m7.v_acc) == (7, 1.0, 1.0)
    rng = stream(0, "accept6")
    letters = ["A", "B", "C", "D", None]
    union_ok = True
    for _ in range(100):
        n = int(rng.integers(1, 60))
        gold = [letters[k] for k in rng.integers(0, 4, n)]
        a = [letters[k] for k in rng.integers(0, 5, n)]
        b = [letters[k] for k in rng.integers(0, 5, n)]
        hits = {i for i in range(n) if a[i] == gold[i]} | {i for i in range(n) if b[i] == gold[i]}
        union_ok &= ensemble_upperbound(a, b, gold) == len(hits) / n
    report(6, fixture and union_ok, f"fixtures exact={fixture}; ensemble equals brute-force union on 100 sets={union_ok}")


# ---------------------------------------------------------------- 7


def _brute_neighbors(t, k):
    t = np.asarray(t, float)
    out = []
    for i in range(len(t)):
        sims = sorted((-(t[i] @ t[j]) / (np.linalg.norm(t[i]) * np.linalg.norm(t[j])), j) for j in range(len(t)) if j != i)
        out.append({j for _, j in sims[:k]})
    return out


def test_criterion_7_overlap_identity():
    table = task_codebook(Task.MAZE).embeddings
    assert table.shape[0] > 50
    ident = embedding_overlap(table, table.copy(), [10, 50])
    ident_ok = ident == {10: 1.0, 50: 1.0}
    rng = stream(0, "accept7")
    sets_ok = True
    for _ in range(5):
        t = rng.normal(size=(64, 16))
        for k in (1, 10, 50):
            sets_ok &= _cosine_neighbors(t, k) == _brute_neighbors(t, k)
    report(7, ident_ok and sets_ok, f"identity ratios {ident} (N={table.shape[0]}); brute-force neighbor sets equal={sets_ok}")


# ---------------------------------------------------------------- 8 and 10: toy training

TOY_SEEDS = (0, 1, 2)
TOY_MODEL = dict(layers=2, heads=4, width=64, ff=256, max_side=4)
TOY_TRAIN = dict(epochs=40, batch_size=16, lr=1e-3, schedule="cosine", lr_floor=0.1)
TOY_DEV = 200
RUN_LIMIT_S = 30 * 60


@lru_cache(maxsize=None)
def toy_data():
    cb = task_codebook(Task.MAZE)
    vocab = build_vocab(Task.MAZE, cb)
    train_set, dev = build_dataset(DatasetConfig(Task.MAZE, sizes=(3, 4), n_train=2000, n_dev=TOY_DEV, seed=0))
    items = []
    for ex in train_set:
        seq = format_example(ex, Variant.MVOT, vocab, cb)
        items.append(TrainItem(seq.ids, seq.loss_mask, ex.size))
    return cb, vocab, items, dev


@lru_cache(maxsize=None)
def toy_run(seed: int, lambda_d: float):
    cb, vocab, items, dev = toy_data()
    t0 = time.time()
    # headroom for held-out traces longer than any training trace
    mcfg = ModelConfig(vocab.size, max_len=max(len(it.ids) for it in items) + 64, seed=seed, **TOY_MODEL)
    params, history = train(TrainConfig(seed=seed, lambda_d=lambda_d, **TOY_TRAIN), mcfg, items, vocab, cb)
    grades = [grade_visualizations(generate_for(params, ex, vocab, cb).images, ex) for ex in dev]
    return vis_metrics(grades).v_acc, history, time.time() - t0


def test_criterion_8_toy_trend():
    rows, holds, slow = [], 0, []
    for seed in TOY_SEEDS:
        v1, _, t1 = toy_run(seed, 1.0)
        v0, _, t0 = toy_run(seed, 0.0)
        good = v1 >= 0.80 and v1 >= v0
        holds += good
        slow += [t for t in (t1, t0) if t >= RUN_LIMIT_S]
        rows.append(f"seed {seed}: V-Acc(1)={v1:.3f} V-Acc(0)={v0:.3f} [{t1 / 60:.1f}/{t0 / 60:.1f} min] {'ok' if good else 'miss'}")
    report(8, holds >= 2 and not slow, f"trend holds on {holds}/3 seeds; " + "; ".join(rows))


def test_criterion_10_training_sanity():
    _, hist1, _ = toy_run(TOY_SEEDS[0], 1.0)
    _, hist0, _ = toy_run(TOY_SEEDS[0], 0.0)
    L = np.array([h.L for h in hist1])
    smooth = np.convolve(L, np.ones(10) / 10, mode="valid")
    rises = int(np.sum(np.diff(smooth) > 0))
    exact = all(h.L == h.L_C for h in hist0)
    report(10, rises == 0 and exact, f"10-epoch moving average of L: {smooth[0]:.4f} -> {smooth[-1]:.4f}, {rises} increases; L == L_C at lambda 0 every epoch={exact}")


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path):
    def gen(out):
        return main(["gen", "--task", "FrozenLake", "--sizes", "3,4", "--train", "60", "--dev", "10", "--seed", "4", "--out", str(out)])

    def fit(data, out):
        return main([
            "train", "--data", str(data), "--out", str(out), "--epochs", "2", "--quiet", "--layers", "1", "--heads", "2",
            "--width", "16", "--ff", "32", "--max-len", "64", "--batch-size", "8", "--dev-limit", "0",
        ])

    assert gen(tmp_path / "d1") == EXIT_OK and gen(tmp_path / "d2") == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "d1").iterdir())
    data_same = all((tmp_path / "d1" / n).read_bytes() == (tmp_path / "d2" / n).read_bytes() for n in names)
    assert fit(tmp_path / "d1", tmp_path / "r1") == EXIT_OK and fit(tmp_path / "d1", tmp_path / "r2") == EXIT_OK
    ckpt_same = (tmp_path / "r1" / "model.ckpt").read_bytes() == (tmp_path / "r2" / "model.ckpt").read_bytes()
    metrics_same = (tmp_path / "r1" / "metrics.jsonl").read_bytes() == (tmp_path / "r2" / "metrics.jsonl").read_bytes()
    report(9, data_same and ckpt_same and metrics_same, f"{len(names)} dataset files identical={data_same}; checkpoint identical={ckpt_same}; metrics identical={metrics_same}")
