"""Unified discrete token space for text and tile images.

* :class:`Codebook` -- one visual embedding per tile kind, built from sprite
  pixels; :func:`similarity_matrix` gives pairwise per-dimension MSE.
* :class:`TokenVocab` -- specials, a word-level text lexicon and one token per
  codebook entry, in disjoint id ranges.
* :func:`augment` -- stochastic nearest-neighbour replacement channel that
  stands in for a lossy tokenize/detokenize round trip.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .gridworld import Task
from .raster import TILE, TileImage, sprite_set
from .rng import stream
from .templates import lexicon_corpus


class CodebookError(ValueError):
    pass


class TokenizationError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


# ---------------------------------------------------------------- codebook


@dataclass(frozen=True, eq=False)
class Codebook:
    kinds: tuple[str, ...]
    embeddings: np.ndarray  # (N, D) float64
    tile_size: int = TILE

    @property
    def n(self) -> int:
        return len(self.kinds)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @cached_property
    def index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.kinds)}

    def tile_of(self, i: int) -> str:
        return self.kinds[i]

    @cached_property
    def similarity(self) -> np.ndarray:
        return similarity_matrix(self)

    @cached_property
    def _neighbor_order(self) -> np.ndarray:
        order = np.argsort(self.similarity, axis=1, kind="stable")
        return np.stack([row[row != i] for i, row in enumerate(order)])

    def neighbors(self, k: int) -> np.ndarray:
        """``(N, k)`` nearest entries under the similarity matrix, self excluded,
        ties broken by index."""
        return self._neighbor_order[:, :k]


def build_codebook(sprites: Mapping[str, np.ndarray]) -> Codebook:
    """Embed each sprite as its flattened pixel vector, centered by the mean
    over all sprites and scaled so the RMS row norm is 1."""
    if not sprites:
        raise CodebookError("empty sprite set")
    kinds = tuple(sorted(sprites))
    shapes = {np.asarray(sprites[k]).shape for k in kinds}
    if len(shapes) != 1:
        raise CodebookError(f"sprites must share one shape, got {shapes}")
    (shape,) = shapes
    seen: dict[bytes, str] = {}
    for k in kinds:
        key = np.ascontiguousarray(sprites[k], dtype=np.uint8).tobytes()
        if key in seen:
            raise CodebookError(f"tile kinds {seen[key]!r} and {k!r} have identical pixels")
        seen[key] = k
    x = np.stack([np.asarray(sprites[k], dtype=np.float64).ravel() / 255.0 for k in kinds])
    x -= x.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum(x * x, axis=1)))
    if rms > 0:
        x /= rms
    # stored at float32 precision so the on-disk codebook round-trips exactly
    return Codebook(kinds, x.astype(np.float32).astype(np.float64), shape[0])


def task_codebook(task: Task) -> Codebook:
    return build_codebook(sprite_set(task))


def similarity_matrix(cb: Codebook) -> np.ndarray:
    """``S[i, j] = mean_d (e_i[d] - e_j[d])**2``."""
    e = cb.embeddings
    s = np.empty((cb.n, cb.n))
    for i in range(cb.n):
        d = e - e[i]
        s[i] = np.einsum("nd,nd->n", d, d) / e.shape[1]
    return s


def tokenize_image(img: TileImage, cb: Codebook) -> list[int]:
    try:
        return [cb.index[k] for k in img.tiles]
    except KeyError as exc:
        raise TokenizationError(f"unknown tile kind {exc.args[0]!r}") from None


def detokenize(tokens: Sequence[int], cb: Codebook, width: int, height: int) -> TileImage:
    if len(tokens) != width * height:
        raise DecodeError(f"expected {width * height} tokens, got {len(tokens)}")
    kinds = []
    for t in tokens:
        if not 0 <= int(t) < cb.n:
            raise DecodeError(f"image token {t} outside [0, {cb.n})")
        kinds.append(cb.kinds[int(t)])
    return TileImage(width, height, tuple(kinds))


def augment(
    tokens: Sequence[int],
    cb: Codebook,
    p: float = 0.05,
    k: int = 3,
    seed: int = 0,
    rounds: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Apply ``r ~ U{0..10}`` noise rounds; each replaces every token with
    probability ``p`` by a uniform pick among its ``k`` nearest entries."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if rng is not None else stream(seed, "augment")
    r = int(rng.integers(0, 11)) if rounds is None else rounds
    out = np.asarray(tokens, dtype=np.int64).copy()
    if r == 0 or p == 0.0 or len(out) == 0:
        return out.tolist()
    nb = cb.neighbors(min(k, cb.n - 1))
    for _ in range(r):
        hit = rng.random(len(out)) < p
        pick = rng.integers(0, nb.shape[1], size=len(out))
        out = np.where(hit, nb[out, pick], out)
    return out.tolist()


# ---------------------------------------------------------------- vocab

_WORD = re.compile(r"\w+|[^\w\s]")
SPECIALS = ("<pad>", "<bos>", "<eos>", "<boi>", "<eoi>")


def split_words(text: str) -> list[str]:
    return _WORD.findall(text)


@dataclass(frozen=True, eq=False)
class TokenVocab:
    task: Task
    text: tuple[str, ...]
    image_kinds: tuple[str, ...]

    PAD, BOS, EOS, BOI, EOI = range(5)

    @property
    def text_offset(self) -> int:
        return len(SPECIALS)

    @property
    def image_offset(self) -> int:
        return len(SPECIALS) + len(self.text)

    @property
    def size(self) -> int:
        return self.image_offset + len(self.image_kinds)

    @cached_property
    def _text_ids(self) -> dict[str, int]:
        return {w: self.text_offset + i for i, w in enumerate(self.text)}

    def kind_of(self, token_id: int) -> str:
        if 0 <= token_id < self.text_offset:
            return "special"
        if token_id < self.image_offset:
            return "text"
        if token_id < self.size:
            return "image"
        raise VocabularyError(token_id)

    def is_image(self, token_id: int) -> bool:
        return self.image_offset <= token_id < self.size

    def encode_text(self, text: str) -> list[int]:
        ids = []
        for w in split_words(text):
            if w not in self._text_ids:
                raise VocabularyError(f"surface form {w!r} not in vocabulary")
            ids.append(self._text_ids[w])
        return ids

    def decode_text(self, ids: Sequence[int]) -> str:
        words = []
        for t in ids:
            if self.text_offset <= t < self.image_offset:
                words.append(self.text[t - self.text_offset])
        s = " ".join(words)
        s = re.sub(r" ([.,:;)\]?!'])", r"\1", s)
        s = re.sub(r"([(\[]) ", r"\1", s)
        s = re.sub(r" ?([/-]) ?", r"\1", s)
        return s

    def image_id(self, index: int) -> int:
        return self.image_offset + int(index)

    def image_index(self, token_id: int) -> int:
        if not self.is_image(token_id):
            raise DecodeError(f"token {token_id} is not an image token")
        return int(token_id) - self.image_offset

    def surface(self, token_id: int) -> str:
        kind = self.kind_of(token_id)
        if kind == "special":
            return SPECIALS[token_id]
        if kind == "text":
            return self.text[token_id - self.text_offset]
        return self.image_kinds[token_id - self.image_offset]

    def manifest(self) -> dict:
        return {
            "format": "mvot-vocab",
            "version": 1,
            "task": Task(self.task).value,
            "specials": {name: i for i, name in enumerate(SPECIALS)},
            "text_offset": self.text_offset,
            "text": list(self.text),
            "image_offset": self.image_offset,
            "image": list(self.image_kinds),
        }

    def digest(self) -> str:
        blob = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def build_lexicon() -> tuple[str, ...]:
    words: set[str] = set()
    for line in lexicon_corpus():
        words.update(split_words(line))
    return tuple(sorted(words))


def build_vocab(task: Task, cb: Codebook) -> TokenVocab:
    return TokenVocab(Task(task), build_lexicon(), cb.kinds)


def save_vocab(path: str | Path, vocab: TokenVocab) -> None:
    Path(path).write_text(json.dumps(vocab.manifest(), indent=1) + "\n")


def load_vocab(path: str | Path) -> TokenVocab:
    d = json.loads(Path(path).read_text())
    if d.get("format") != "mvot-vocab" or d.get("version") != 1:
        raise VocabularyError("unsupported vocab manifest")
    return TokenVocab(Task(d["task"]), tuple(d["text"]), tuple(d["image"]))


# ---------------------------------------------------------------- sequences


@dataclass
class TokenSequence:
    ids: list[int]
    loss_mask: list[int]
    spans: list[tuple[int, int, str]] = field(default_factory=list)  # [start, end), modality

    def __len__(self) -> int:
        return len(self.ids)

    def image_spans(self) -> list[tuple[int, int]]:
        return [(s, e) for s, e, m in self.spans if m == "image"]


def parse_spans(ids: Sequence[int], vocab: TokenVocab) -> list[tuple[int, int, str]]:
    """Split a token stream into text and image spans. An image span runs from
    a BOI to the matching EOI (or the end of the stream if unterminated)."""
    spans: list[tuple[int, int, str]] = []
    i, n = 0, len(ids)
    start = 0
    while i < n:
        if ids[i] == vocab.BOI:
            if i > start:
                spans.append((start, i, "text"))
            j = i + 1
            while j < n and ids[j] != vocab.EOI:
                j += 1
            end = min(j + 1, n)
            spans.append((i, end, "image"))
            i = start = end
        else:
            i += 1
    if start < n:
        spans.append((start, n, "text"))
    return spans


# ---------------------------------------------------------------- codebook file

_CB_MAGIC = b"MVOTCB"
_CB_VERSION = 1


def save_codebook(path: str | Path, cb: Codebook) -> None:
    header = json.dumps(
        {"N": cb.n, "D": cb.dim, "tile_size": cb.tile_size, "mse": "mean", "kinds": list(cb.kinds)},
        separators=(",", ":"),
    ).encode()
    body = np.ascontiguousarray(cb.embeddings, dtype="<f4").tobytes()
    Path(path).write_bytes(_CB_MAGIC + struct.pack("<HI", _CB_VERSION, len(header)) + header + body)


def load_codebook(path: str | Path) -> Codebook:
    data = Path(path).read_bytes()
    if data[:6] != _CB_MAGIC:
        raise CodebookError("bad codebook magic")
    version, hlen = struct.unpack_from("<HI", data, 6)
    if version != _CB_VERSION:
        raise CodebookError(f"unsupported codebook version {version}")
    header = json.loads(data[12 : 12 + hlen])
    n, d = header["N"], header["D"]
    body = data[12 + hlen :]
    if len(body) != 4 * n * d:
        raise CodebookError("truncated codebook body")
    emb = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)
    return Codebook(tuple(header["kinds"]), emb, header["tile_size"])
