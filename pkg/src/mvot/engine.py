"""Teacher-forced training and recursive interleaved greedy decoding."""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .codec import Codebook, TokenVocab, augment, detokenize
from .datagen import Example, Variant, prompt_sequence
from .model import (
    AdamState,
    CellTracker,
    KVCache,
    LossBreakdown,
    ModelConfig,
    Params,
    SequenceLengthError,
    TokenClasses,
    adam_init,
    clip_grad,
    init,
    loss_and_grad,
    make_batch,
    optimize_step,
)
from .raster import TileImage
from .rng import stream


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    lr: float = 3e-4
    augment: bool = True
    aug_p: float = 0.05
    aug_k: int = 3
    lambda_d: float = 1.0
    grad_clip: float = 1.0
    eval_every: int = 0  # 0: dev accuracy only after the last epoch
    dev_limit: int = 50
    checkpoint_every: int = 0
    schedule: str = "constant"  # or "cosine": decay to lr_floor * lr over the run
    lr_floor: float = 0.1

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 <= self.aug_p <= 1.0 or self.aug_k < 1:
            raise ConfigError("augmentation needs p in [0, 1] and k >= 1")
        if self.lambda_d < 0:
            raise ConfigError("lambda_d must be nonnegative")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.lr_floor <= 1.0:
            raise ConfigError("lr_floor must be in [0, 1]")

    def lr_at(self, step: int, total: int) -> float:
        if self.schedule == "constant" or total <= 1:
            return self.lr
        frac = min(step, total - 1) / (total - 1)
        return self.lr * (self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainItem:
    """One formatted training sequence."""

    ids: list[int]
    loss_mask: list[int]
    side: int


@dataclass
class EpochLog:
    epoch: int
    L: float
    L_C: float
    L_D: float
    dev_accuracy: float | None
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "L": self.L, "L_C": self.L_C, "L_D": self.L_D, "dev_accuracy": self.dev_accuracy}


def _batches(n: int, size: int, lengths: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    # shuffle, then sort by length inside windows of 16 batches to cut padding
    order = rng.permutation(n)
    window = size * 16
    out = []
    for w in range(0, n, window):
        chunk = order[w : w + window]
        chunk = chunk[np.argsort([lengths[i] for i in chunk], kind="stable")]
        out += [chunk[i : i + size] for i in range(0, len(chunk), size)]
    return [out[i] for i in rng.permutation(len(out))]


def augment_inputs(ids: Sequence[int], vocab: TokenVocab, cb: Codebook, p: float, k: int, rng) -> list[int]:
    """Copy of ``ids`` with every image block passed through the noise channel."""
    out = list(ids)
    i = 0
    while i < len(out):
        if out[i] == vocab.BOI:
            j = i + 1
            while j < len(out) and vocab.is_image(out[j]):
                j += 1
            idx = [vocab.image_index(t) for t in out[i + 1 : j]]
            out[i + 1 : j] = [vocab.image_id(t) for t in augment(idx, cb, p, k, rng=rng)]
            i = j
        else:
            i += 1
    return out


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    items: Sequence[TrainItem],
    vocab: TokenVocab,
    cb: Codebook,
    dev: Sequence[Example] = (),
    log: Callable[[EpochLog], None] | None = None,
    checkpoint: Callable[[int, Params], None] | None = None,
    params: Params | None = None,
) -> tuple[Params, list[EpochLog]]:
    """Teacher forcing: every conditioning context is the golden sequence
    (optionally noised by the augmentation channel); generated tokens are
    never fed back during training."""
    if model_cfg.vocab_size != vocab.size:
        raise ConfigError(f"model vocab {model_cfg.vocab_size} != dataset vocab {vocab.size}")
    longest = max(len(it.ids) for it in items) - 1
    if longest > model_cfg.max_len:
        raise ConfigError(f"longest example needs {longest} positions, max_len is {model_cfg.max_len}")
    p = params if params is not None else init(model_cfg)
    opt = adam_init(p, lr=cfg.lr)
    classes = TokenClasses.of(vocab)
    S = cb.similarity
    lengths = [len(it.ids) for it in items]
    history: list[EpochLog] = []
    per_epoch = -(-len(items) // cfg.batch_size)
    total = per_epoch * cfg.epochs
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        rng = stream(cfg.seed, "shuffle", epoch)
        sums = np.zeros(3)
        count = 0
        for bi, idx in enumerate(_batches(len(items), cfg.batch_size, lengths, rng)):
            seqs = [items[i].ids for i in idx]
            inputs = None
            if cfg.augment and cfg.aug_p > 0:
                arng = stream(cfg.seed, "augment", epoch, bi)
                inputs = [augment_inputs(s, vocab, cb, cfg.aug_p, cfg.aug_k, arng) for s in seqs]
            batch = make_batch(seqs, [items[i].loss_mask for i in idx], classes, inputs, [items[i].side for i in idx])
            br, g = loss_and_grad(p, batch, S, vocab.image_offset, cfg.lambda_d)
            clip_grad(g, cfg.grad_clip)
            p, opt = optimize_step(p, g, opt, cfg.lr_at(opt.t, total))
            sums += (br.L, br.L_C, br.L_D)
            count += 1
        acc = None
        last = epoch == cfg.epochs
        if dev and (last or (cfg.eval_every and epoch % cfg.eval_every == 0)):
            acc = dev_accuracy(p, list(dev)[: cfg.dev_limit], vocab, cb)
        entry = EpochLog(epoch, *(sums / count).tolist(), acc, time.time() - t0)
        history.append(entry)
        if log:
            log(entry)
        if checkpoint and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            checkpoint(epoch, p)
    return p, history


# ---------------------------------------------------------------- decoding

_ANSWER = re.compile(r"the\s+answer\s+is\s*:?\s*\(?([A-D])(?![A-Za-z0-9_])", re.IGNORECASE)


def extract_answer(text: str) -> str | None:
    found = _ANSWER.findall(text)
    return found[-1].upper() if found else None


@dataclass
class GenerationResult:
    ids: list[int]  # prompt + generated
    generated: list[int]
    steps: list[str]  # verbal text preceding each visual thought
    images: list[TileImage | None]  # None when a span could not be decoded
    text: str
    answer: str | None
    truncated: bool = False
    stop: str = ""

    @property
    def image_count(self) -> int:
        return len(self.images)


def _decode_images(gen: Sequence[int], vocab: TokenVocab, cb: Codebook, side: int):
    steps, images = [], []
    text: list[int] = []
    i = 0
    while i < len(gen):
        t = gen[i]
        if t == vocab.BOI:
            j = i + 1
            while j < len(gen) and gen[j] != vocab.EOI:
                j += 1
            body = gen[i + 1 : j]
            steps.append(vocab.decode_text(text))
            text = []
            try:
                images.append(detokenize([vocab.image_index(x) for x in body], cb, side, side))
            except ValueError:
                images.append(None)
            i = j + 1
        else:
            text.append(t)
            i += 1
    return steps, images


def generate(
    p: Params,
    prompt: Sequence[int],
    vocab: TokenVocab,
    cb: Codebook,
    side: int,
    mode: Variant | str = Variant.MVOT,
    max_steps: int = 2048,
) -> GenerationResult:
    """Greedy decoding. Inside an image block only image tokens are eligible,
    and EOI is forced after ``side**2`` of them; each finished image stays in
    the context, so later steps condition on the model's own visual thoughts."""
    classes = TokenClasses.of(vocab)
    cache = KVCache(p)
    tracker = CellTracker(classes, side)
    lo, hi = vocab.image_offset, vocab.size
    feats = [tracker.feed(int(t)) for t in prompt]
    ids = list(prompt)
    gen: list[int] = []
    truncated = False
    stop = "max_steps"
    try:
        logits = cache.feed(ids, np.array(feats, dtype=np.int64).T)[-1]
    except SequenceLengthError:
        return GenerationResult(ids, [], [], [], "", None, True, "context")
    recent: list[str] = []
    for _ in range(max_steps):
        remaining = tracker.block_remaining
        if remaining is None:
            tok = int(np.argmax(logits))
        elif remaining > 0:
            tok = lo + int(np.argmax(logits[lo:hi]))
        else:
            tok = vocab.EOI
        gen.append(tok)
        ids.append(tok)
        if tok == vocab.EOS:
            stop = "eos"
            break
        if remaining is None and vocab.kind_of(tok) == "text":
            recent = (recent + [vocab.text[tok - vocab.text_offset]])[-4:]
            if extract_answer(" ".join(recent)):
                stop = "answer"
                break
        if len(ids) >= p.cfg.max_len:
            truncated, stop = True, "context"
            break
        f = tracker.feed(tok)
        logits = cache.feed([tok], np.array(f, dtype=np.int64).reshape(4, 1))[-1]
    steps, images = _decode_images(gen, vocab, cb, side)
    text = vocab.decode_text(gen)
    return GenerationResult(ids, gen, steps, images, text, extract_answer(text), truncated, stop)


def generate_for(p: Params, ex: Example, vocab: TokenVocab, cb: Codebook, mode=Variant.MVOT, max_steps: int = 2048):
    return generate(p, prompt_sequence(ex, vocab, cb).ids, vocab, cb, ex.size, mode, max_steps)


def dev_accuracy(p: Params, dev: Sequence[Example], vocab: TokenVocab, cb: Codebook) -> float:
    if not dev:
        return float("nan")
    hits = sum(generate_for(p, ex, vocab, cb).answer == ex.answer for ex in dev)
    return hits / len(dev)


def write_metrics(path: str | Path, history: Sequence[EpochLog]) -> None:
    with open(path, "w") as fh:
        for h in history:
            fh.write(json.dumps(h.to_dict(), sort_keys=True) + "\n")


__all__ = [
    "ConfigError",
    "EpochLog",
    "GenerationResult",
    "TrainConfig",
    "TrainItem",
    "augment_inputs",
    "dev_accuracy",
    "extract_answer",
    "generate",
    "generate_for",
    "train",
    "write_metrics",
]
