"""Tile rendering of environment states and cell-level image diffs.

An image is a grid of tile kinds (strings); its pixel buffer is the
concatenation of fixed ``TILE x TILE`` RGB sprites. Each task has a closed
sprite set, enumerated by :func:`sprite_set`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .gridworld import (
    EAST,
    NORTH,
    SOUTH,
    WEST,
    EnvState,
    LakeEnv,
    MazeEnv,
    PrinterEnv,
    Task,
)

TILE = 8

MAZE_MARKS = ("-", "S", "A", "B", "C", "D")
MAZE_PATHS = ("-", "agent", "up", "down", "left", "right")
LAKE_KINDS = ("ice", "hole", "gift", "agent", "agent_hole", "agent_gift")
PRINTER_KINDS = ("floor", "table", "printer", "printer_table", "printer_table_on", "agent")


def maze_kind(mask: int, mark: str, path: str) -> str:
    return f"maze/{mask:x}/{mark}/{path}"


def tile_kinds(task: Task) -> tuple[str, ...]:
    task = Task(task)
    if task is Task.MAZE:
        return tuple(maze_kind(m, mk, p) for m in range(16) for mk in MAZE_MARKS for p in MAZE_PATHS)
    if task is Task.FROZENLAKE:
        return tuple(f"lake/{k}" for k in LAKE_KINDS)
    return tuple(f"printer/{k}" for k in PRINTER_KINDS)


# ---------------------------------------------------------------- sprites


def _glyph(rows: list[str]) -> np.ndarray:
    return np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)


_DOT = _glyph(["......", "..##..", ".####.", ".####.", "..##..", "......"])
_ARROW_UP = _glyph(["..##..", ".####.", "######", "..##..", "..##..", "..##.."])
_ARROWS = {
    "up": _ARROW_UP,
    "down": _ARROW_UP[::-1],
    "left": _ARROW_UP.T,
    "right": _ARROW_UP.T[:, ::-1],
}
_TRIANGLE = _glyph(["......", "..##..", "..##..", ".####.", ".####.", "######"])
_PRINTER = _glyph(["......", ".####.", "######", "######", ".#..#.", "......"])
_ELF = _glyph(["..##..", ".####.", "..##..", ".####.", "..##..", ".#..#."])
_GIFT = _glyph(["......", ".####.", "######", ".####.", ".####.", "......"])

RED = (220, 30, 30)
WALL = (20, 20, 20)
MARK_COLORS = {
    "-": (250, 250, 250),
    "S": (255, 205, 205),
    "A": (180, 210, 255),
    "B": (180, 240, 180),
    "C": (255, 240, 150),
    "D": (220, 190, 250),
}


def _paint(tile: np.ndarray, glyph: np.ndarray, color) -> None:
    tile[1:7, 1:7][glyph] = color


def _maze_sprite(mask: int, mark: str, path: str) -> np.ndarray:
    t = np.empty((TILE, TILE, 3), dtype=np.uint8)
    t[:] = MARK_COLORS[mark]
    for bit, sl in (
        (NORTH, (0, slice(None))),
        (SOUTH, (TILE - 1, slice(None))),
        (WEST, (slice(None), 0)),
        (EAST, (slice(None), TILE - 1)),
    ):
        if not mask & bit:
            t[sl] = WALL
    for y in (0, TILE - 1):
        for x in (0, TILE - 1):
            t[y, x] = WALL
    if path == "agent":
        _paint(t, _DOT, RED)
    elif path != "-":
        _paint(t, _ARROWS[path], RED)
    return t


def _texture(seed: int, base, spread: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.integers(-spread, spread + 1, size=(TILE, TILE, 3))
    return np.clip(np.asarray(base)[None, None, :] + noise, 0, 255).astype(np.uint8)


def _lake_sprite(kind: str) -> np.ndarray:
    ice = _texture(11, (200, 228, 245), 22)
    if kind in ("hole", "agent_hole"):
        t = _texture(12, (30, 50, 90), 18)
        t[0, :] = t[-1, :] = t[:, 0] = t[:, -1] = ice[0, 0]
    else:
        t = ice.copy()
    if kind in ("gift", "agent_gift"):
        _paint(t, _GIFT, (200, 40, 60))
        t[1:7, 3:5][_GIFT[:, 2:4]] = (250, 210, 40)
    if kind.startswith("agent"):
        _paint(t, _ELF, (40, 160, 60))
        t[2:4, 3:5] = (245, 200, 170)
    return t


def _printer_sprite(kind: str) -> np.ndarray:
    t = np.empty((TILE, TILE, 3), dtype=np.uint8)
    t[:] = (150, 90, 40) if "table" in kind else (215, 215, 215)
    if kind.startswith("printer"):
        _paint(t, _PRINTER, (60, 60, 70))
        if kind.endswith("_on"):
            t[3, 5:7] = (40, 230, 60)
    elif kind == "agent":
        _paint(t, _TRIANGLE, RED)
    return t


def sprite(kind: str) -> np.ndarray:
    family, rest = kind.split("/", 1)
    if family == "maze":
        mask, mark, path = rest.split("/")
        return _maze_sprite(int(mask, 16), mark, path)
    if family == "lake":
        return _lake_sprite(rest)
    if family == "printer":
        return _printer_sprite(rest)
    raise KeyError(kind)


@lru_cache(maxsize=None)
def _sprite_table(task: Task) -> dict[str, np.ndarray]:
    out = {}
    for k in tile_kinds(task):
        s = sprite(k)
        s.setflags(write=False)
        out[k] = s
    return out


def sprite_set(task: Task) -> dict[str, np.ndarray]:
    """All sprites of ``task``, keyed by tile kind (read-only arrays)."""
    return dict(_sprite_table(Task(task)))


# ---------------------------------------------------------------- images


@dataclass(frozen=True)
class TileImage:
    width: int
    height: int
    tiles: tuple[str, ...]  # row-major

    def __post_init__(self):
        if len(self.tiles) != self.width * self.height:
            raise ValueError("tile count does not match dimensions")

    def at(self, cell: tuple[int, int]) -> str:
        return self.tiles[cell[1] * self.width + cell[0]]

    @property
    def pixels(self) -> np.ndarray:
        h, w = self.height, self.width
        out = np.empty((h * TILE, w * TILE, 3), dtype=np.uint8)
        for i, kind in enumerate(self.tiles):
            y, x = divmod(i, w)
            out[y * TILE : (y + 1) * TILE, x * TILE : (x + 1) * TILE] = sprite_cached(kind)
        return out


@lru_cache(maxsize=4096)
def sprite_cached(kind: str) -> np.ndarray:
    s = sprite(kind)
    s.setflags(write=False)
    return s


_DIR_NAME = {(0, -1): "up", (0, 1): "down", (-1, 0): "left", (1, 0): "right"}


def render(env: EnvState) -> TileImage:
    n = env.size
    if isinstance(env, MazeEnv):
        marks = {env.start: "S"}
        marks.update({c: label for label, c in env.destinations})
        paths: dict[tuple[int, int], str] = {}
        hist = env.path_history
        for a, b in zip(hist, hist[1:]):
            paths[a] = _DIR_NAME[(b[0] - a[0], b[1] - a[1])]
        paths[env.agent] = "agent"
        tiles = tuple(
            maze_kind(env.mask((x, y)), marks.get((x, y), "-"), paths.get((x, y), "-"))
            for y in range(n)
            for x in range(n)
        )
        return TileImage(n, n, tiles)
    if isinstance(env, LakeEnv):
        tiles = []
        for y in range(n):
            for x in range(n):
                c = (x, y)
                if c == env.agent:
                    k = "agent_hole" if c in env.holes else "agent_gift" if c == env.gift else "agent"
                elif c in env.holes:
                    k = "hole"
                elif c == env.gift:
                    k = "gift"
                else:
                    k = "ice"
                tiles.append("lake/" + k)
        return TileImage(n, n, tuple(tiles))
    if isinstance(env, PrinterEnv):
        tiles = []
        for y in range(n):
            for x in range(n):
                c = (x, y)
                if c == env.agent:
                    k = "agent"
                elif c == env.printer:
                    if c in env.table:
                        k = "printer_table_on" if env.toggled else "printer_table"
                    else:
                        k = "printer"
                elif c in env.table:
                    k = "table"
                else:
                    k = "floor"
                tiles.append("printer/" + k)
        return TileImage(n, n, tuple(tiles))
    raise TypeError(type(env))


def diff_cells(a: TileImage, b: TileImage) -> set[tuple[int, int]]:
    """Cells whose tile kinds differ."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")
    return {(i % a.width, i // a.width) for i, (s, t) in enumerate(zip(a.tiles, b.tiles)) if s != t}


# ---------------------------------------------------------------- export


def ppm_bytes(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def write_ppm(path: str | Path, image: TileImage | np.ndarray) -> None:
    pixels = image.pixels if isinstance(image, TileImage) else image
    Path(path).write_bytes(ppm_bytes(pixels))


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError("not an 8-bit binary PPM")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_png(path: str | Path, image: TileImage | np.ndarray, scale: int = 4) -> None:
    from PIL import Image

    pixels = image.pixels if isinstance(image, TileImage) else image
    pixels = np.repeat(np.repeat(pixels, scale, axis=0), scale, axis=1)
    Image.fromarray(pixels).save(path)


def side_by_side(images: list[TileImage], gap: int = 2) -> np.ndarray:
    """Horizontal strip of images separated by white columns."""
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(np.full((im.height * TILE, gap, 3), 255, dtype=np.uint8))
        parts.append(im.pixels)
    return np.concatenate(parts, axis=1)
