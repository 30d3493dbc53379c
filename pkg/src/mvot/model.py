"""Tiny decoder-only transformer over the unified text+image vocabulary.

Everything is plain numpy with hand-written backward passes. Parameters live
in one flat array; named tensors are views into it, and gradients share the
same layout, so the optimizer and checkpointing only ever see one buffer.

Architecture: pre-LN blocks, tied input/output embedding, learned absolute
positions, ALiBi recency bias on the attention scores, and 2-D tile position
embeddings for image tokens (row/column of the tile a token carries and of
the tile to be predicted next), which play the role of patch positions in an
image tokenizer.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import stream


class SequenceLengthError(ValueError):
    pass


class LabelError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, tensor: str, message: str = "non-finite values"):
        super().__init__(f"{message} in {tensor}")
        self.tensor = tensor


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 4
    width: int = 128
    ff: int = 512
    max_len: int = 1024
    max_side: int = 10
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        for name in ("vocab_size", "layers", "heads", "width", "ff", "max_len", "max_side"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def parameter_count(cfg: ModelConfig) -> int:
    v, t, d, f, s, nl = cfg.vocab_size, cfg.max_len, cfg.width, cfg.ff, cfg.max_side, cfg.layers
    return v * d + t * d + 4 * (s + 1) * d + nl * (4 * d * d + 2 * d * f + f + d + 4 * d) + 2 * d


CELL_TABLES = ("cell_cur_row", "cell_cur_col", "cell_next_row", "cell_next_col")


def layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.width, cfg.ff
    out: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("pos_emb", (cfg.max_len, d)),
    ]
    out += [(name, (cfg.max_side + 1, d)) for name in CELL_TABLES]
    for i in range(cfg.layers):
        p = f"layer{i}."
        out += [
            (p + "ln1_g", (d,)),
            (p + "ln1_b", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "ln2_g", (d,)),
            (p + "ln2_b", (d,)),
            (p + "w1", (d, f)),
            (p + "b1", (f,)),
            (p + "w2", (f, d)),
            (p + "b2", (d,)),
        ]
    out += [("lnf_g", (d,)), ("lnf_b", (d,))]
    return out


class Params:
    """Flat parameter (or gradient) store with named views."""

    def __init__(self, cfg: ModelConfig, data: np.ndarray | None = None, dtype=np.float32):
        self.cfg = cfg
        self.layout = layout(cfg)
        self.offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        off = 0
        for name, shape in self.layout:
            self.offsets[name] = (off, shape)
            off += int(np.prod(shape))
        if data is None:
            data = np.zeros(off, dtype=dtype)
        if data.shape != (off,):
            raise ValueError(f"flat array has {data.size} entries, layout needs {off}")
        self.data = data

    def __getitem__(self, name: str) -> np.ndarray:
        off, shape = self.offsets[name]
        return self.data[off : off + int(np.prod(shape))].reshape(shape)

    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def zeros_like(self) -> "Params":
        return Params(self.cfg, np.zeros_like(self.data))

    def astype(self, dtype) -> "Params":
        return Params(self.cfg, self.data.astype(dtype))

    def copy(self) -> "Params":
        return Params(self.cfg, self.data.copy())

    @property
    def size(self) -> int:
        return self.data.size


def init(cfg: ModelConfig, dtype=np.float32) -> Params:
    p = Params(cfg, dtype=dtype)
    rng = stream(cfg.seed, "init")
    resid = cfg.init_std / math.sqrt(2 * cfg.layers)
    for name, shape in p.layout:
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            p[name][...] = 1.0
        elif leaf.startswith("b") or leaf.endswith("_b"):
            p[name][...] = 0.0
        else:
            std = resid if leaf in ("wo", "w2") else cfg.init_std
            p[name][...] = rng.normal(0.0, std, size=shape)
    return p


def init_std_bound(cfg: ModelConfig, name: str) -> float:
    leaf = name.split(".")[-1]
    if leaf.endswith("_g") or leaf.startswith("b") or leaf.endswith("_b"):
        return 0.0
    return cfg.init_std / math.sqrt(2 * cfg.layers) if leaf in ("wo", "w2") else cfg.init_std


# ---------------------------------------------------------------- tile positions


@dataclass(frozen=True)
class TokenClasses:
    """Id ranges the model needs to know about (mirrors ``TokenVocab``)."""

    boi: int
    eoi: int
    image_offset: int
    image_count: int

    @classmethod
    def of(cls, vocab) -> "TokenClasses":
        return cls(vocab.BOI, vocab.EOI, vocab.image_offset, len(vocab.image_kinds))

    def is_image(self, t: int) -> bool:
        return self.image_offset <= t < self.image_offset + self.image_count


class CellTracker:
    """Incremental tile-position features: for each fed token, the 1-based
    (row, col) of the tile it carries and of the tile the next token should
    carry; 0 means "not inside an image block"."""

    def __init__(self, classes: TokenClasses, side: int):
        self.c, self.side = classes, side
        self.in_block = False
        self.k = 0

    def _cell(self, k: int) -> tuple[int, int]:
        if self.side <= 0 or k >= self.side * self.side:
            return 0, 0
        return k // self.side + 1, k % self.side + 1

    def feed(self, t: int) -> tuple[int, int, int, int]:
        if t == self.c.boi:
            self.in_block, self.k = True, 0
            return (0, 0) + self._cell(0)
        if self.in_block and self.c.is_image(t):
            cur = self._cell(self.k)
            self.k += 1
            return cur + self._cell(self.k)
        if t == self.c.eoi:
            self.in_block = False
        return 0, 0, 0, 0

    @property
    def block_remaining(self) -> int | None:
        """Image tokens still owed to the open block, or None outside blocks."""
        if not self.in_block:
            return None
        return max(self.side * self.side - self.k, 0)


def infer_side(ids: Sequence[int], classes: TokenClasses) -> int:
    """Grid side from the first complete image block (0 if there is none)."""
    start = None
    for i, t in enumerate(ids):
        if t == classes.boi:
            start = i
        elif t == classes.eoi and start is not None:
            n = i - start - 1
            side = int(round(math.sqrt(n)))
            return side if side * side == n else 0
    return 0


def cell_features(ids: Sequence[int], classes: TokenClasses, side: int | None = None) -> np.ndarray:
    """``(4, T)`` int array of tile-position features for ``ids``."""
    side = infer_side(ids, classes) if side is None else side
    tr = CellTracker(classes, side)
    return np.array([tr.feed(int(t)) for t in ids], dtype=np.int64).T.reshape(4, len(ids))


# ---------------------------------------------------------------- forward


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u):
    t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def _ln_back(dy, g, cache):
    xh, inv = cache
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, (dy * xh).reshape(-1, xh.shape[-1]).sum(0), dy.reshape(-1, dy.shape[-1]).sum(0)


def alibi_slopes(heads: int) -> np.ndarray:
    return 2.0 ** (-8.0 * np.arange(1, heads + 1) / heads)


def attention_bias(heads: int, t: int, dtype=np.float64) -> np.ndarray:
    """``(H, T, T)`` causal ALiBi bias; masked entries are -1e9."""
    i = np.arange(t)
    dist = (i[:, None] - i[None, :]).astype(np.float64)
    bias = -alibi_slopes(heads)[:, None, None] * dist[None]
    bias = np.where(dist[None] < 0, -1e9, bias)
    return bias.astype(dtype)


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _as_batch(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    return ids[None] if ids.ndim == 1 else ids


def _embed(p: Params, ids: np.ndarray, cells: np.ndarray, start: int = 0) -> np.ndarray:
    t = ids.shape[1]
    x = p["tok_emb"][ids] + p["pos_emb"][start : start + t][None]
    for j, name in enumerate(CELL_TABLES):
        x = x + p[name][cells[:, j]]
    return x


def forward(p: Params, tokens, cells: np.ndarray | None = None, classes: TokenClasses | None = None,
            side=None, return_cache: bool = False, rows: np.ndarray | None = None):
    """Next-token logits ``(B, T, V)`` (or ``(T, V)`` for a 1-D input).

    ``cells`` is the ``(B, 4, T)`` tile-position feature array; when omitted
    it is derived from ``classes`` (and ``side``), or left all-zero. With
    ``rows`` (flat indices into ``B*T``) only those positions are projected
    to the vocabulary and the result is ``(len(rows), V)``.
    """
    cfg = p.cfg
    squeeze = np.asarray(tokens).ndim == 1
    ids = _as_batch(tokens)
    b, t = ids.shape
    if t > cfg.max_len:
        raise SequenceLengthError(f"sequence of length {t} exceeds max_len {cfg.max_len}")
    if cells is None:
        if classes is None:
            cells = np.zeros((b, 4, t), dtype=np.int64)
        else:
            sides = side if isinstance(side, (list, tuple, np.ndarray)) else [side] * b
            cells = np.stack([cell_features(r, classes, s) for r, s in zip(ids.tolist(), sides)])
    cells = np.asarray(cells).reshape(b, 4, t)
    dt = p.data.dtype
    h_, d = cfg.heads, cfg.width
    dh = d // h_
    scale = 1.0 / math.sqrt(dh)
    bias = attention_bias(h_, t, dt)
    x = _embed(p, ids, cells)
    caches = []
    for i in range(cfg.layers):
        pre = f"layer{i}."
        hn, ln1 = _ln(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = (hn @ p[pre + "wq"]).reshape(b, t, h_, dh).transpose(0, 2, 1, 3)
        k = (hn @ p[pre + "wk"]).reshape(b, t, h_, dh).transpose(0, 2, 1, 3)
        v = (hn @ p[pre + "wv"]).reshape(b, t, h_, dh).transpose(0, 2, 1, 3)
        a = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + bias)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        x1 = x + o @ p[pre + "wo"]
        h2, ln2 = _ln(x1, p[pre + "ln2_g"], p[pre + "ln2_b"])
        u = h2 @ p[pre + "w1"] + p[pre + "b1"]
        g, th = _gelu(u)
        x2 = x1 + g @ p[pre + "w2"] + p[pre + "b2"]
        if return_cache:
            caches.append((hn, ln1, q, k, v, a, o, h2, ln2, u, g, th))
        x = x2
    hf, lnf = _ln(x, p["lnf_g"], p["lnf_b"])
    if rows is not None:
        logits = hf.reshape(b * t, d)[rows] @ p["tok_emb"].T
        squeeze = False
    else:
        logits = hf @ p["tok_emb"].T
    if return_cache:
        return logits, (ids, cells, caches, hf, lnf, rows)
    return logits[0] if squeeze else logits


# ---------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    L: float
    L_C: float
    L_D: float
    L_D_sum: float
    n_text: int
    n_image: int
    lambda_d: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def discrepancy_penalty(S: np.ndarray, label: int, vocab_size: int, image_offset: int) -> np.ndarray:
    """Per-token penalty vector for an image position whose label is image
    index ``label``: ``S[label]`` on image tokens, ``max(S[label])`` elsewhere."""
    row = S[label]
    pen = np.full(vocab_size, row.max(), dtype=np.float64)
    pen[image_offset : image_offset + len(row)] = row
    return pen


def loss(
    logits: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    S: np.ndarray,
    image_offset: int,
    lambda_d: float = 1.0,
    return_grad: bool = False,
):
    """Masked cross-entropy plus token discrepancy.

    ``targets[.., t]`` is the token to be predicted at position ``t`` and
    ``mask`` selects supervised positions. Positions whose target is an image
    token also contribute ``pen . softmax(logits)`` to ``L_D``; ``L_D`` is the
    mean over those positions (``L_D_sum`` keeps the raw sum).
    """
    logits = np.asarray(logits)
    v = logits.shape[-1]
    z = logits.reshape(-1, v)
    tg = np.asarray(targets).reshape(-1)
    m = np.asarray(mask).reshape(-1).astype(bool)
    n_img_kinds = S.shape[0]
    sup = tg[m]
    if np.any((sup < 0) | (sup >= v)) or np.any((sup >= image_offset + n_img_kinds) & (sup >= image_offset)):
        raise LabelError("supervised target outside the vocabulary or image range")
    is_img = (tg >= image_offset) & (tg < image_offset + n_img_kinds)
    sel = np.flatnonzero(m)
    img_sel = np.flatnonzero(m & is_img)
    n_c, n_d = len(sel), len(img_sel)

    zs = z[sel].astype(np.float64)
    zs = zs - zs.max(-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(-1))
    logp_t = zs[np.arange(n_c), tg[sel]] - lse
    l_c = float(-logp_t.sum() / n_c) if n_c else 0.0

    zi = z[img_sel].astype(np.float64)
    P = _softmax(zi) if n_d else np.zeros((0, v))
    labels = tg[img_sel] - image_offset
    if n_d:
        rows = S[labels]  # (n_d, N)
        pen = np.repeat(rows.max(-1, keepdims=True), v, axis=1)
        pen[:, image_offset : image_offset + n_img_kinds] = rows
        per_pos = (P * pen).sum(-1)
    else:
        pen = np.zeros((0, v))
        per_pos = np.zeros(0)
    l_d_sum = float(per_pos.sum())
    l_d = l_d_sum / n_d if n_d else 0.0
    total = l_c if lambda_d == 0 else l_c + lambda_d * l_d
    out = LossBreakdown(total, l_c, l_d, l_d_sum, n_c - n_d, n_d, float(lambda_d))
    for name, val in (("L_C", l_c), ("L_D", l_d)):
        if not math.isfinite(val):
            raise NumericError(name, "non-finite loss")
    if not return_grad:
        return out
    grad = np.zeros(z.shape, dtype=np.float64)
    if n_c:
        pc = np.exp(zs - lse[:, None])
        pc[np.arange(n_c), tg[sel]] -= 1.0
        grad[sel] = pc / n_c
    if n_d and lambda_d != 0:
        grad[img_sel] += (lambda_d / n_d) * P * (pen - per_pos[:, None])
    return out, grad.reshape(logits.shape).astype(logits.dtype)


# ---------------------------------------------------------------- backward


def backward(p: Params, cache, dlogits: np.ndarray) -> Params:
    """Gradients of a scalar loss w.r.t. all parameters, given its gradient
    ``dlogits`` w.r.t. the logits of the cached forward pass."""
    cfg = p.cfg
    ids, cells, caches, hf, lnf, rows = cache
    b, t = ids.shape
    h_, d = cfg.heads, cfg.width
    dh = d // h_
    scale = 1.0 / math.sqrt(dh)
    gr = p.zeros_like()
    dl = dlogits.reshape(-1, dlogits.shape[-1])
    hflat = hf.reshape(b * t, d)
    if rows is None:
        gr["tok_emb"][...] += dl.T @ hflat
        dhf = (dl @ p["tok_emb"]).reshape(b, t, d)
    else:
        gr["tok_emb"][...] += dl.T @ hflat[rows]
        dhf = np.zeros_like(hflat)
        dhf[rows] = dl @ p["tok_emb"]
        dhf = dhf.reshape(b, t, d)
    dx, dg, db = _ln_back(dhf, p["lnf_g"], lnf)
    gr["lnf_g"][...] = dg
    gr["lnf_b"][...] = db
    for i in reversed(range(cfg.layers)):
        pre = f"layer{i}."
        hn, ln1, q, k, v, a, o, h2, ln2, u, g, th = caches[i]
        # feed-forward
        gr[pre + "b2"][...] = dx.reshape(-1, d).sum(0)
        gr[pre + "w2"][...] = g.reshape(-1, cfg.ff).T @ dx.reshape(-1, d)
        du = (dx @ p[pre + "w2"].T) * _gelu_grad(u, th)
        gr[pre + "b1"][...] = du.reshape(-1, cfg.ff).sum(0)
        gr[pre + "w1"][...] = h2.reshape(-1, d).T @ du.reshape(-1, cfg.ff)
        dh2 = du @ p[pre + "w1"].T
        dx1, dg, db = _ln_back(dh2, p[pre + "ln2_g"], ln2)
        gr[pre + "ln2_g"][...] = dg
        gr[pre + "ln2_b"][...] = db
        dx = dx + dx1
        # attention
        gr[pre + "wo"][...] = o.reshape(-1, d).T @ dx.reshape(-1, d)
        do = (dx @ p[pre + "wo"].T).reshape(b, t, h_, dh).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda z: z.transpose(0, 2, 1, 3).reshape(b * t, d)  # noqa: E731
        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        hf_ = hn.reshape(b * t, d)
        gr[pre + "wq"][...] = hf_.T @ dq
        gr[pre + "wk"][...] = hf_.T @ dk
        gr[pre + "wv"][...] = hf_.T @ dv
        dhn = (dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T).reshape(b, t, d)
        dx0, dg, db = _ln_back(dhn, p[pre + "ln1_g"], ln1)
        gr[pre + "ln1_g"][...] = dg
        gr[pre + "ln1_b"][...] = db
        dx = dx + dx0
    flat = dx.reshape(b * t, d)
    np.add.at(gr["tok_emb"], ids.reshape(-1), flat)
    gr["pos_emb"][:t] += dx.sum(0)
    for j, name in enumerate(CELL_TABLES):
        np.add.at(gr[name], cells[:, j].reshape(-1), flat)
    if not np.all(np.isfinite(gr.data)):
        for name in gr.names():
            if not np.all(np.isfinite(gr[name])):
                raise NumericError(name)
    return gr


@dataclass
class Batch:
    inputs: np.ndarray  # (B, T) ids fed to the model
    targets: np.ndarray  # (B, T) id expected at each position
    mask: np.ndarray  # (B, T) 1 where the target is supervised
    cells: np.ndarray  # (B, 4, T)


def make_batch(
    seqs: Sequence[Sequence[int]],
    masks: Sequence[Sequence[int]],
    classes: TokenClasses,
    inputs: Sequence[Sequence[int]] | None = None,
    sides: Sequence[int | None] | None = None,
    pad: int = 0,
) -> Batch:
    """Right-padded teacher-forcing batch. ``inputs`` (same structure as
    ``seqs``) may carry augmented tokens; targets always come from ``seqs``."""
    inputs = seqs if inputs is None else inputs
    sides = sides or [None] * len(seqs)
    t = max(len(s) for s in seqs) - 1
    b = len(seqs)
    x = np.full((b, t), pad, dtype=np.int64)
    y = np.full((b, t), pad, dtype=np.int64)
    m = np.zeros((b, t), dtype=np.int64)
    c = np.zeros((b, 4, t), dtype=np.int64)
    for i, (s, mk, inp, side) in enumerate(zip(seqs, masks, inputs, sides)):
        n = len(s) - 1
        x[i, :n] = inp[:-1]
        y[i, :n] = s[1:]
        m[i, :n] = mk[1:]
        # tile positions follow the golden structure (augmentation keeps it)
        c[i, :, :n] = cell_features(s[:-1], classes, side)
    return Batch(x, y, m, c)


def loss_and_grad(p: Params, batch: Batch, S: np.ndarray, image_offset: int, lambda_d: float = 1.0):
    """Loss and parameter gradients; only supervised positions are projected
    to the vocabulary (the others cannot affect the loss)."""
    rows = np.flatnonzero(batch.mask.reshape(-1))
    logits, cache = forward(p, batch.inputs, batch.cells, return_cache=True, rows=rows)
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits")
    tg = batch.targets.reshape(-1)[rows]
    br, dlogits = loss(logits, tg, np.ones(len(rows)), S, image_offset, lambda_d, return_grad=True)
    return br, backward(p, cache, dlogits)


def batch_loss(p: Params, batch: Batch, S: np.ndarray, image_offset: int, lambda_d: float = 1.0) -> LossBreakdown:
    rows = np.flatnonzero(batch.mask.reshape(-1))
    logits = forward(p, batch.inputs, batch.cells, rows=rows)
    return loss(logits, batch.targets.reshape(-1)[rows], np.ones(len(rows)), S, image_offset, lambda_d)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(p: Params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros_like(p.data), np.zeros_like(p.data), 0, lr, beta1, beta2, eps)


def optimize_step(p: Params, g: Params, st: AdamState, lr: float | None = None) -> tuple[Params, AdamState]:
    lr = st.lr if lr is None else lr
    t = st.t + 1
    m = st.beta1 * st.m + (1 - st.beta1) * g.data
    v = st.beta2 * st.v + (1 - st.beta2) * g.data * g.data
    mhat = m / (1 - st.beta1**t)
    vhat = v / (1 - st.beta2**t)
    new = p.data - (lr * mhat / (np.sqrt(vhat) + st.eps)).astype(p.data.dtype)
    return Params(p.cfg, new), AdamState(m, v, t, st.lr, st.beta1, st.beta2, st.eps)


def clip_grad(g: Params, max_norm: float) -> float:
    norm = float(np.sqrt(np.sum(g.data.astype(np.float64) ** 2)))
    if max_norm and norm > max_norm:
        g.data *= max_norm / norm
    return norm


# ---------------------------------------------------------------- incremental decoding


class KVCache:
    """Per-layer key/value buffers for single-sequence greedy decoding."""

    def __init__(self, p: Params):
        cfg = p.cfg
        dh = cfg.width // cfg.heads
        self.p = p
        self.k = [np.zeros((cfg.heads, cfg.max_len, dh), dtype=p.data.dtype) for _ in range(cfg.layers)]
        self.v = [np.zeros((cfg.heads, cfg.max_len, dh), dtype=p.data.dtype) for _ in range(cfg.layers)]
        self.length = 0

    def feed(self, ids: Sequence[int], cells: np.ndarray) -> np.ndarray:
        """Append ``ids`` (with ``(4, n)`` tile features); returns their logits."""
        p, cfg = self.p, self.p.cfg
        n = len(ids)
        start = self.length
        if start + n > cfg.max_len:
            raise SequenceLengthError(f"context of {start + n} tokens exceeds max_len {cfg.max_len}")
        h_, d = cfg.heads, cfg.width
        dh = d // h_
        scale = 1.0 / math.sqrt(dh)
        ids_a = np.asarray(ids, dtype=np.int64)[None]
        x = _embed(p, ids_a, np.asarray(cells).reshape(1, 4, n), start)[0]
        end = start + n
        pos = np.arange(start, end)
        dist = (pos[:, None] - np.arange(end)[None, :]).astype(np.float64)
        bias = -alibi_slopes(h_)[:, None, None] * dist[None]
        bias = np.where(dist[None] < 0, -1e9, bias).astype(p.data.dtype)
        for i in range(cfg.layers):
            pre = f"layer{i}."
            hn, _ = _ln(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = (hn @ p[pre + "wq"]).reshape(n, h_, dh).transpose(1, 0, 2)
            self.k[i][:, start:end] = (hn @ p[pre + "wk"]).reshape(n, h_, dh).transpose(1, 0, 2)
            self.v[i][:, start:end] = (hn @ p[pre + "wv"]).reshape(n, h_, dh).transpose(1, 0, 2)
            k, v = self.k[i][:, :end], self.v[i][:, :end]
            a = _softmax(q @ k.transpose(0, 2, 1) * scale + bias)
            o = (a @ v).transpose(1, 0, 2).reshape(n, d)
            x = x + o @ p[pre + "wo"]
            h2, _ = _ln(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            g, _ = _gelu(h2 @ p[pre + "w1"] + p[pre + "b1"])
            x = x + g @ p[pre + "w2"] + p[pre + "b2"]
        hf, _ = _ln(x, p["lnf_g"], p["lnf_b"])
        self.length = end
        return hf @ p["tok_emb"].T


# ---------------------------------------------------------------- checkpoints

_CK_MAGIC = b"MVOTCK"
_CK_VERSION = 1


def save_checkpoint(path: str | Path, p: Params, extra: dict | None = None) -> None:
    cfg = p.cfg
    tensors = []
    for name, shape in p.layout:
        off, _ = p.offsets[name]
        tensors.append({"name": name, "shape": list(shape), "offset": off})
    header = json.dumps(
        {"config": cfg.to_dict(), "tensors": tensors, "extra": extra or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    body = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    blob = _CK_MAGIC + struct.pack("<H", _CK_VERSION) + bytes.fromhex(cfg.digest())
    blob += struct.pack("<I", len(header)) + header + body
    Path(path).write_bytes(blob)


def read_checkpoint_header(path: str | Path) -> dict:
    return _parse_checkpoint(Path(path).read_bytes())[0]


def _parse_checkpoint(data: bytes):
    if len(data) < 44 or data[:6] != _CK_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    (version,) = struct.unpack_from("<H", data, 6)
    if version != _CK_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    digest = data[8:40].hex()
    (hlen,) = struct.unpack_from("<I", data, 40)
    if len(data) < 44 + hlen:
        raise CheckpointFormatError("truncated checkpoint header")
    try:
        header = json.loads(data[44 : 44 + hlen])
    except ValueError as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from None
    cfg = ModelConfig(**header["config"])
    if cfg.digest() != digest:
        raise CheckpointFormatError("config digest does not match header")
    return header, cfg, data[44 + hlen :]


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Params:
    header, cfg, body = _parse_checkpoint(Path(path).read_bytes())
    if expect is not None and expect.digest() != cfg.digest():
        raise CheckpointFormatError("checkpoint was written for a different model config")
    n = parameter_count(cfg)
    if len(body) != 4 * n:
        raise CheckpointFormatError(f"checkpoint body has {len(body)} bytes, expected {4 * n}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return Params(cfg, data)


# ---------------------------------------------------------------- gradient check


def grad_check(
    p: Params,
    batch: Batch,
    S: np.ndarray,
    image_offset: int,
    lambda_d: float = 1.0,
    coords: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-7,
) -> tuple[float, np.ndarray]:
    """Max relative error of analytic gradients vs central differences on
    ``coords`` coordinates sampled evenly across tensors (float64)."""
    p64 = p.astype(np.float64)
    _, g = loss_and_grad(p64, batch, S, image_offset, lambda_d)
    rng = stream(seed, "grad_check")
    names = p64.names()
    picks = []
    for j in range(coords):
        name = names[j % len(names)]
        off, shape = p64.offsets[name]
        picks.append(off + int(rng.integers(int(np.prod(shape)))))
    errs = []
    for idx in picks:
        old = p64.data[idx]
        p64.data[idx] = old + h
        lp = batch_loss(p64, batch, S, image_offset, lambda_d).L
        p64.data[idx] = old - h
        lm = batch_loss(p64, batch, S, image_offset, lambda_d).L
        p64.data[idx] = old
        num = (lp - lm) / (2 * h)
        ana = g.data[idx]
        errs.append(abs(ana - num) / max(abs(ana), abs(num), floor))
    errs = np.array(errs)
    return float(errs.max()), errs


__all__ = [
    "AdamState",
    "Batch",
    "CellTracker",
    "CheckpointFormatError",
    "KVCache",
    "LabelError",
    "LossBreakdown",
    "ModelConfig",
    "NumericError",
    "Params",
    "SequenceLengthError",
    "TokenClasses",
    "adam_init",
    "backward",
    "batch_loss",
    "cell_features",
    "discrepancy_penalty",
    "forward",
    "grad_check",
    "init",
    "loss",
    "loss_and_grad",
    "make_batch",
    "optimize_step",
    "parameter_count",
    "read_checkpoint_header",
    "save_checkpoint",
    "load_checkpoint",
]
