"""Command line: ``mvot gen | train | eval | analyze``.

Settings come from built-in defaults, then an optional flat ``key = value``
config file (``--config``), then explicit flags. Exit codes: 0 success,
2 usage or missing input, 3 integrity (digest) mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .codec import build_vocab, load_codebook, load_vocab, save_codebook, save_vocab, task_codebook
from .datagen import (
    DatasetConfig,
    DatasetExhaustedError,
    Example,
    Variant,
    example_record,
    read_jsonl,
    stats,
    write_jsonl,
)
from .engine import ConfigError, TrainConfig, TrainItem, generate_for, train, write_metrics
from .evaluation import build_report, embedding_overlap
from .gridworld import InvalidSpecError, Task
from .model import CheckpointFormatError, ModelConfig, NumericError, load_checkpoint, read_checkpoint_header, save_checkpoint
from .raster import side_by_side, write_ppm

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {path} not found", EXIT_USAGE)
    parser = configparser.ConfigParser()
    parser.read_string("[run]\n" + p.read_text())
    return {k.replace("-", "_"): v for k, v in parser["run"].items()}


def merged(args: argparse.Namespace, keys: dict[str, tuple[type, object]]) -> dict:
    """defaults < config file < flags (flags parsed with default None)."""
    conf = read_config(getattr(args, "config", None))
    out = {}
    for key, (kind, default) in keys.items():
        val = getattr(args, key, None)
        if val is None and key in conf:
            raw = conf[key]
            try:
                if kind is bool:
                    val = raw.strip().lower() in ("1", "true", "yes", "on")
                elif kind is tuple:
                    val = tuple(int(x) for x in raw.replace(",", " ").split())
                else:
                    val = kind(raw)
            except ValueError:
                raise CliError(f"bad value for {key}: {raw!r}", EXIT_USAGE) from None
        out[key] = default if val is None else val
    unknown = set(conf) - set(keys)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}", EXIT_USAGE)
    return out


def _sizes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


def _ks(text: str) -> tuple[int, ...]:
    return _sizes(text)


# ---------------------------------------------------------------- gen

GEN_KEYS = {
    "task": (str, None),
    "sizes": (tuple, None),
    "train": (int, 2000),
    "dev": (int, 500),
    "seed": (int, 0),
    "variants": (str, "all"),
    "export_ppm": (int, 0),
    "max_attempts": (int, 0),
}


def cmd_gen(args) -> int:
    s = merged(args, GEN_KEYS)
    if s["task"] is None:
        raise CliError("--task is required", EXIT_USAGE)
    try:
        task = Task(s["task"])
        cfg = DatasetConfig(task, s["sizes"], s["train"], s["dev"], s["seed"], max_attempts=s["max_attempts"] or None)
    except (ValueError, InvalidSpecError) as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    variants = list(Variant) if s["variants"] == "all" else [Variant(v) for v in s["variants"].split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        train_set, dev_set = _build(cfg)
    except DatasetExhaustedError as exc:
        print(json.dumps({"error": str(exc), "partial": exc.counts}, sort_keys=True), file=sys.stderr)
        return EXIT_USAGE
    cb = task_codebook(task)
    vocab = build_vocab(task, cb)
    save_codebook(out / "codebook.bin", cb)
    save_vocab(out / "vocab.json", vocab)
    files = {}
    for split, exs in (("train", train_set), ("dev", dev_set)):
        for v in variants:
            name = f"{split}.{v.value}.jsonl"
            write_jsonl(out / name, (example_record(e, v, vocab, cb) for e in exs))
            files[name] = sha256_file(out / name)
    _dump(out / "stats.json", {"train": stats(train_set).to_dict(), "dev": stats(dev_set).to_dict()})
    for name in ("codebook.bin", "vocab.json", "stats.json"):
        files[name] = sha256_file(out / name)
    conf = cfg.to_dict()
    _dump(
        out / "manifest.json",
        {
            "kind": "mvot-dataset",
            "version": __version__,
            "config": conf,
            "config_digest": config_digest(conf),
            "vocab_digest": vocab.digest(),
            "files": files,
        },
    )
    if s["export_ppm"]:
        ppm = out / "ppm"
        ppm.mkdir(exist_ok=True)
        for i, ex in enumerate(dev_set[: s["export_ppm"]]):
            write_ppm(ppm / f"dev{i:04d}.ppm", side_by_side([img for _, img in ex.trace()]))
    print(json.dumps({"out": str(out), "train": len(train_set), "dev": len(dev_set)}))
    return EXIT_OK


def _build(cfg):
    from .datagen import build_dataset

    return build_dataset(cfg)


def load_dataset_dir(path: str | Path) -> tuple[Path, dict]:
    d = Path(path)
    mf = d / "manifest.json"
    if not mf.exists():
        raise CliError(f"{mf} not found", EXIT_USAGE)
    manifest = json.loads(mf.read_text())
    for name, digest in manifest["files"].items():
        f = d / name
        if not f.exists():
            continue
        if sha256_file(f) != digest:
            raise CliError(f"{f} does not match its manifest digest", EXIT_INTEGRITY)
    vocab = load_vocab(d / "vocab.json")
    if vocab.digest() != manifest["vocab_digest"]:
        raise CliError("vocab digest mismatch", EXIT_INTEGRITY)
    return d, manifest


def _split_file(d: Path, split: str, variant: Variant) -> Path:
    f = d / f"{split}.{variant.value}.jsonl"
    if not f.exists():
        raise CliError(f"{f} not found", EXIT_USAGE)
    return f


# ---------------------------------------------------------------- train

TRAIN_KEYS = {
    "variant": (str, "MVoT"),
    "epochs": (int, 60),
    "batch_size": (int, 16),
    "seed": (int, 0),
    "lr": (float, 3e-4),
    "lambda_d": (float, 1.0),
    "augment": (bool, True),
    "aug_p": (float, 0.05),
    "aug_k": (int, 3),
    "grad_clip": (float, 1.0),
    "eval_every": (int, 0),
    "dev_limit": (int, 50),
    "checkpoint_every": (int, 0),
    "schedule": (str, "constant"),
    "lr_floor": (float, 0.1),
    "layers": (int, 4),
    "heads": (int, 4),
    "width": (int, 128),
    "ff": (int, 512),
    "max_len": (int, 1024),
}


def cmd_train(args) -> int:
    if args.no_token_discrepancy:
        args.lambda_d = 0.0
    if args.no_augment:
        args.augment = False
    s = merged(args, TRAIN_KEYS)
    d, manifest = load_dataset_dir(args.data)
    variant = Variant(s["variant"])
    vocab = load_vocab(d / "vocab.json")
    cb = load_codebook(d / "codebook.bin")
    recs = read_jsonl(_split_file(d, "train", variant))
    items = [TrainItem(r["token_ids"], r["loss_mask"], r["grid_size"]) for r in recs]
    dev = []
    dev_file = d / f"dev.{variant.value}.jsonl"
    if dev_file.exists() and s["dev_limit"] > 0:
        dev = [Example.from_dict(r) for r in read_jsonl(dev_file)[: s["dev_limit"]]]
    longest = max(len(it.ids) for it in items)
    max_len = max(s["max_len"], longest)
    try:
        mcfg = ModelConfig(vocab.size, s["layers"], s["heads"], s["width"], s["ff"], max_len, 10, s["seed"])
        tcfg = TrainConfig(**{k: s[k] for k in TrainConfig.__dataclass_fields__})
    except (ValueError, ConfigError) as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = {
        "variant": variant.value,
        "train": tcfg.to_dict(),
        "model": mcfg.to_dict(),
        "data_config_digest": manifest["config_digest"],
        "vocab_digest": manifest["vocab_digest"],
        "train_file_digest": manifest["files"][f"train.{variant.value}.jsonl"],
        "task": manifest["config"]["task"],
        "version": __version__,
    }
    run["run_digest"] = config_digest(run)
    metrics = out / "metrics.jsonl"
    metrics.write_text("")

    def log(entry):
        with open(metrics, "a") as fh:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
        if not args.quiet:
            print(json.dumps(entry.to_dict(), sort_keys=True), flush=True)

    def ckpt(epoch, p):
        save_checkpoint(out / f"model.epoch{epoch:03d}.ckpt", p, run)

    try:
        params, _ = train(tcfg, mcfg, items, vocab, cb, dev, log, ckpt)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_INTEGRITY) from None
    save_checkpoint(out / "model.ckpt", params, run)
    _dump(out / "run.json", run)
    return EXIT_OK


def _load_run(checkpoint: str, data: str):
    ck = Path(checkpoint)
    if not ck.exists():
        raise CliError(f"{ck} not found", EXIT_USAGE)
    d, manifest = load_dataset_dir(data)
    try:
        header = read_checkpoint_header(ck)
        params = load_checkpoint(ck)
    except CheckpointFormatError as exc:
        raise CliError(str(exc), EXIT_INTEGRITY) from None
    run = header.get("extra", {})
    if run.get("vocab_digest") != manifest["vocab_digest"]:
        raise CliError("checkpoint was trained on a different vocabulary", EXIT_INTEGRITY)
    return d, manifest, params, run


# ---------------------------------------------------------------- eval

EVAL_KEYS = {"split": (str, "dev"), "limit": (int, 0), "max_steps": (int, 2048), "strips": (int, 0)}


def cmd_eval(args) -> int:
    s = merged(args, EVAL_KEYS)
    d, manifest, params, run = _load_run(args.checkpoint, args.data)
    variant = Variant(args.variant or run.get("variant", "MVoT"))
    vocab = load_vocab(d / "vocab.json")
    cb = load_codebook(d / "codebook.bin")
    recs = read_jsonl(_split_file(d, s["split"], variant))
    if s["limit"]:
        recs = recs[: s["limit"]]
    examples = [Example.from_dict(r) for r in recs]
    results = [generate_for(params, ex, vocab, cb, variant, s["max_steps"]) for ex in examples]
    with_images = variant in (Variant.MVOT, Variant.INTERLEAVED)
    report = build_report(examples, [r.answer for r in results], [r.images for r in results] if with_images else None)
    body = report.to_dict()
    body["variant"] = variant.value
    body["checkpoint_run_digest"] = run.get("run_digest")
    body["truncated"] = sum(r.truncated for r in results)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump(out, body)
    if s["strips"] and with_images:
        sdir = out.parent / (out.stem + "_strips")
        sdir.mkdir(exist_ok=True)
        for i, (ex, r) in enumerate(zip(examples[: s["strips"]], results)):
            oracle = [img for _, img in ex.trace()]
            gen = [im for im in r.images if im is not None and im.width == ex.size]
            if gen:
                write_ppm(sdir / f"{i:04d}_generated.ppm", side_by_side(gen))
            write_ppm(sdir / f"{i:04d}_oracle.ppm", side_by_side(oracle))
    print(json.dumps({k: body[k] for k in ("accuracy", "V-Acc", "V-Red", "V-Steps", "V-Ratio")}))
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    d, manifest, params, run = _load_run(args.checkpoint, args.data)
    vocab = load_vocab(d / "vocab.json")
    cb = load_codebook(d / "codebook.bin")
    if args.codebook:
        cb = load_codebook(args.codebook)
    lm = params["tok_emb"][vocab.image_offset : vocab.image_offset + cb.n]
    ks = [k for k in args.ks if k < cb.n]
    skipped = [k for k in args.ks if k >= cb.n]
    body = {
        "N": cb.n,
        "overlap": {str(k): v for k, v in embedding_overlap(lm, cb.embeddings, ks).items()} if ks else {},
        "skipped_k": skipped,
        "checkpoint_run_digest": run.get("run_digest"),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump(out, body)
    print(json.dumps(body["overlap"]))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvot", description="Multimodal visualization-of-thought toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1, keeps runs bitwise stable)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate train/dev splits in all formats")
    g.add_argument("--config", help="flat key = value file")
    g.add_argument("--task", choices=[t.value for t in Task])
    g.add_argument("--sizes", type=_sizes, help="grid sizes, e.g. 3,4")
    g.add_argument("--train", type=int, help="train examples (default 2000)")
    g.add_argument("--dev", type=int, help="dev examples (default 500)")
    g.add_argument("--seed", type=int, help="root seed (default 0)")
    g.add_argument("--variants", help="comma list of formats or 'all'")
    g.add_argument("--export-ppm", type=int, dest="export_ppm", help="write PPM strips for the first N dev examples")
    g.add_argument("--max-attempts", type=int, dest="max_attempts", help="candidate budget before giving up")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on one format")
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--data", required=True, help="dataset directory written by gen")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda-d", type=float, dest="lambda_d")
    t.add_argument("--no-token-discrepancy", action="store_true", help="set lambda_d = 0")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--aug-p", type=float, dest="aug_p")
    t.add_argument("--aug-k", type=int, dest="aug_k")
    t.add_argument("--grad-clip", type=float, dest="grad_clip")
    t.add_argument("--eval-every", type=int, dest="eval_every")
    t.add_argument("--dev-limit", type=int, dest="dev_limit")
    t.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    t.add_argument("--schedule", choices=["constant", "cosine"])
    t.add_argument("--lr-floor", type=float, dest="lr_floor", help="final lr as a fraction of --lr under the cosine schedule")
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--ff", type=int)
    t.add_argument("--max-len", type=int, dest="max_len")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train, augment=None)

    e = sub.add_parser("eval", help="decode a split and write an evaluation report")
    e.add_argument("--config", help="flat key = value file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--variant", choices=[v.value for v in Variant])
    e.add_argument("--split", choices=["train", "dev"])
    e.add_argument("--limit", type=int)
    e.add_argument("--max-steps", type=int, dest="max_steps")
    e.add_argument("--strips", type=int, help="write generated/oracle PPM strips for the first N examples")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="top-k embedding overlap of image tokens vs the codebook")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--codebook", help="codebook file (default: the dataset's)")
    a.add_argument("--ks", type=_ks, default=(10, 50))
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(max(1, args.threads)):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
