from __future__ import annotations

import json
from pathlib import Path

import pytest

from mvot.cli import EXIT_INTEGRITY, EXIT_OK, EXIT_USAGE, main

TINY = ["--layers", "1", "--heads", "2", "--width", "16", "--ff", "32", "--max-len", "64", "--batch-size", "8", "--dev-limit", "0"]


def gen(out: Path, *extra) -> int:
    return main(["gen", "--task", "FrozenLake", "--sizes", "3", "--train", "12", "--dev", "4", "--seed", "1", "--out", str(out), *extra])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert gen(root / "data", "--variants", "MVoT,Direct") == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--epochs", "2", "--quiet", *TINY]) == EXIT_OK
    return root


def test_gen_is_byte_deterministic(tmp_path):
    assert gen(tmp_path / "a") == EXIT_OK and gen(tmp_path / "b") == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in names and "train.MVoT.jsonl" in names and "codebook.bin" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_gen_invalid_size_is_usage_error(tmp_path):
    assert main(["gen", "--task", "Maze", "--sizes", "2", "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_gen_exhaustion_reports_partial(tmp_path, capsys):
    assert main(["gen", "--task", "Maze", "--sizes", "3", "--train", "50", "--dev", "10", "--max-attempts", "20", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["partial"]["train"] <= 20


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("task = Maze\nbogus = 1\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("task = FrozenLake\nsizes = 3\ntrain = 7\ndev = 3\nseed = 9\nvariants = Direct\n")
    assert main(["gen", "--config", str(cfg), "--train", "5", "--out", str(tmp_path / "x")]) == EXIT_OK
    manifest = json.loads((tmp_path / "x" / "manifest.json").read_text())
    assert manifest["config"]["n_train"] == 5 and manifest["config"]["seed"] == 9
    assert sum(1 for _ in open(tmp_path / "x" / "train.Direct.jsonl")) == 5


def test_digest_mismatch_is_integrity_error(tmp_path):
    assert gen(tmp_path / "d", "--variants", "MVoT") == EXIT_OK
    f = tmp_path / "d" / "train.MVoT.jsonl"
    f.write_bytes(f.read_bytes() + b"\n")
    code = main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--epochs", "1", "--quiet", *TINY])
    assert code == EXIT_INTEGRITY


def test_missing_inputs_are_usage_errors(tmp_path, run_dir):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert main(["train", "--data", str(run_dir / "data"), "--variant", "CoTLayout", "--out", str(tmp_path / "r")]) == EXIT_USAGE
    code = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(run_dir / "data"), "--out", str(tmp_path / "e.json")])
    assert code == EXIT_USAGE


def test_train_outputs(run_dir):
    run = run_dir / "run"
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    assert set(json.loads(lines[0])) == {"epoch", "L", "L_C", "L_D", "dev_accuracy"}
    meta = json.loads((run / "run.json").read_text())
    assert meta["train"]["lambda_d"] == 1.0 and len(meta["run_digest"]) == 64


def test_no_token_discrepancy_flag(tmp_path, run_dir):
    out = tmp_path / "r0"
    assert main(["train", "--data", str(run_dir / "data"), "--out", str(out), "--epochs", "1", "--quiet", "--no-token-discrepancy", *TINY]) == EXIT_OK
    rec = json.loads((out / "metrics.jsonl").read_text())
    assert rec["L"] == rec["L_C"]


def test_eval_schema_and_idempotent(tmp_path, run_dir):
    args = ["eval", "--checkpoint", str(run_dir / "run" / "model.ckpt"), "--data", str(run_dir / "data"), "--limit", "3", "--max-steps", "120"]
    assert main([*args, "--out", str(tmp_path / "a.json")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b.json")]) == EXIT_OK
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes()
    body = json.loads(a)
    for key in ("accuracy", "V-Acc", "V-Red", "V-Steps", "V-Ratio", "by_grid_size", "counts"):
        assert key in body
    assert body["counts"]["examples"] == 3


def test_eval_rejects_foreign_vocabulary(tmp_path, run_dir):
    assert main(["gen", "--task", "Maze", "--sizes", "3", "--train", "5", "--dev", "2", "--variants", "MVoT", "--out", str(tmp_path / "m")]) == EXIT_OK
    code = main(["eval", "--checkpoint", str(run_dir / "run" / "model.ckpt"), "--data", str(tmp_path / "m"), "--out", str(tmp_path / "e.json")])
    assert code == EXIT_INTEGRITY


def test_analyze_skips_large_k(tmp_path, run_dir):
    out = tmp_path / "o.json"
    assert main(["analyze", "--checkpoint", str(run_dir / "run" / "model.ckpt"), "--data", str(run_dir / "data"), "--ks", "2,10", "--out", str(out)]) == EXIT_OK
    body = json.loads(out.read_text())
    assert body["N"] == 6 and list(body["overlap"]) == ["2"] and body["skipped_k"] == [10]
    assert 0.0 <= body["overlap"]["2"] <= 1.0
