"""Per-page prediction maps and the noisy oracle that synthesizes them.

The six maps mirror a grid-detector's output heads: a cell-relative box,
a character-presence confidence, class probabilities, start/end-of-line
confidences, and a 4-direction reading-order distribution per grid cell.
Arrays are indexed ``arr[i-1, j-1]`` for grid (i, j), stored float32 so the
on-disk format round-trips losslessly.

The oracle stands in for a trained predictor: it renders exact maps from a
synthetic page's ground truth, then corrupts them according to
:class:`OracleNoise`.  With all-zero noise the maps decode back to the
ground truth exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .geometry import Box, GridShape, RelBox, abs_to_rel, grid_of

if TYPE_CHECKING:
    from .synth import SyntheticPage

EPS = 1e-6  # probability floor/ceiling written by the oracle

MAGIC = b"PGNM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII dd")


class Direction(IntEnum):
    """The four reading-order directions with their (di, dj) grid deltas."""

    UP = 0
    RIGHT = 1
    DOWN = 2
    LEFT = 3


DIR_DELTAS: tuple[tuple[int, int], ...] = ((0, -1), (1, 0), (0, 1), (-1, 0))
_DELTA_TO_DIR = {d: Direction(k) for k, d in enumerate(DIR_DELTAS)}


def step(grid: tuple[int, int], d: int) -> tuple[int, int]:
    di, dj = DIR_DELTAS[d]
    return grid[0] + di, grid[1] + dj


def staircase(
    src: tuple[int, int],
    dst: tuple[int, int],
    vertical_slots: Sequence[int] | None = None,
) -> list[tuple[tuple[int, int], Direction]]:
    """Monotone grid path from ``src`` to ``dst`` as (grid, direction) steps.

    The path takes |di| horizontal and |dj| vertical unit moves; the vertical
    moves occupy ``vertical_slots`` (0-based positions among the total
    |di|+|dj| steps).  ``None`` selects the deterministic variant with all
    horizontal moves first.  Each emitted pair is the grid a move leaves
    from; the final move lands on ``dst``.
    """
    di = dst[0] - src[0]
    dj = dst[1] - src[1]
    total = abs(di) + abs(dj)
    if vertical_slots is None:
        vertical_slots = range(abs(di), total)
    slots = set(vertical_slots)
    if len(slots) != abs(dj):
        raise ValueError(f"need {abs(dj)} vertical slots, got {len(slots)}")
    sx = (di > 0) - (di < 0)
    sy = (dj > 0) - (dj < 0)
    out: list[tuple[tuple[int, int], Direction]] = []
    cur = src
    for k in range(total):
        move = (0, sy) if k in slots else (sx, 0)
        out.append((cur, _DELTA_TO_DIR[move]))
        cur = (cur[0] + move[0], cur[1] + move[1])
    assert cur == dst
    return out


class MapFormatError(ValueError):
    """Raised when a prediction-map file or payload is malformed."""


class GridCollisionError(ValueError):
    """Two characters (or a character and an inter-character path) share a grid."""


@dataclass
class OracleNoise:
    """Corruption model applied to otherwise exact oracle maps.

    jitter_sigma and size_sigma are relative to the page's mean character
    size; the *_p fields are per-character (or per-grid, for spurious and
    dir_flip) probabilities.
    """

    jitter_sigma: float = 0.0
    size_sigma: float = 0.0
    label_swap_p: float = 0.0
    drop_p: float = 0.0
    spurious_p: float = 0.0
    dir_flip_p: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("label_swap_p", "drop_p", "spurious_p", "dir_flip_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.jitter_sigma < 0 or self.size_sigma < 0:
            raise ValueError("sigmas must be >= 0")

    def scaled(self, factor: float) -> "OracleNoise":
        """All magnitudes multiplied by ``factor`` (seed unchanged)."""
        return OracleNoise(
            jitter_sigma=self.jitter_sigma * factor,
            size_sigma=self.size_sigma * factor,
            label_swap_p=self.label_swap_p * factor,
            drop_p=self.drop_p * factor,
            spurious_p=self.spurious_p * factor,
            dir_flip_p=self.dir_flip_p * factor,
            seed=self.seed,
        )


@dataclass
class PredictionMaps:
    """The six per-grid output tensors for one page."""

    shape: GridShape
    n_cls: int
    box: np.ndarray  # (w_g, h_g, 4) cell-relative boxes
    dis: np.ndarray  # (w_g, h_g) presence confidence
    cls: np.ndarray  # (w_g, h_g, n_cls) class probabilities
    sol: np.ndarray  # (w_g, h_g) start-of-line confidence
    eol: np.ndarray  # (w_g, h_g) end-of-line confidence
    rd: np.ndarray  # (w_g, h_g, 4) direction probabilities

    def rel_box(self, i: int, j: int) -> RelBox:
        x_o, y_o, w_o, h_o = (float(v) for v in self.box[i - 1, j - 1])
        return RelBox(x_o, y_o, w_o, h_o)

    def validate(self) -> None:
        s = self.shape
        dims = {
            "box": (s.w_g, s.h_g, 4),
            "dis": (s.w_g, s.h_g),
            "cls": (s.w_g, s.h_g, self.n_cls),
            "sol": (s.w_g, s.h_g),
            "eol": (s.w_g, s.h_g),
            "rd": (s.w_g, s.h_g, 4),
        }
        for name, want in dims.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise MapFormatError(f"{name}: expected shape {want}, got {arr.shape}")
            if np.isnan(arr).any():
                raise MapFormatError(f"{name}: NaN payload")
        for name in ("dis", "cls", "sol", "eol", "rd"):
            arr = getattr(self, name)
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise MapFormatError(f"{name}: probability outside [0, 1]")
        for name in ("cls", "rd"):
            sums = getattr(self, name).sum(axis=-1, dtype=np.float64)
            if np.abs(sums - 1.0).max() > 1e-5:
                raise MapFormatError(f"{name}: rows not normalized")

    def copy(self) -> "PredictionMaps":
        return PredictionMaps(
            shape=self.shape,
            n_cls=self.n_cls,
            box=self.box.copy(),
            dis=self.dis.copy(),
            cls=self.cls.copy(),
            sol=self.sol.copy(),
            eol=self.eol.copy(),
            rd=self.rd.copy(),
        )

    def equals(self, other: "PredictionMaps") -> bool:
        return (
            self.shape == other.shape
            and self.n_cls == other.n_cls
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("box", "dis", "cls", "sol", "eol", "rd")
            )
        )


def _blank_maps(shape: GridShape, n_cls: int) -> PredictionMaps:
    w, h = shape.w_g, shape.h_g
    rd = np.full((w, h, 4), EPS, dtype=np.float32)
    # Unused grids point at the nearest boundary so stray searches exit the
    # lattice instead of wandering; ties resolve in direction-index order.
    ii = np.arange(1, w + 1, dtype=np.float32)[:, None]
    jj = np.arange(1, h + 1, dtype=np.float32)[None, :]
    dist = np.stack(
        [
            np.broadcast_to(jj - 1, (w, h)),
            np.broadcast_to(w - ii, (w, h)),
            np.broadcast_to(h - jj, (w, h)),
            np.broadcast_to(ii - 1, (w, h)),
        ],
        axis=-1,
    )
    outward = np.argmin(dist, axis=-1)
    np.put_along_axis(rd, outward[..., None], 1.0 - 3 * EPS, axis=-1)
    return PredictionMaps(
        shape=shape,
        n_cls=n_cls,
        box=np.full((w, h, 4), 0.5, dtype=np.float32),
        dis=np.full((w, h), EPS, dtype=np.float32),
        cls=np.full((w, h, n_cls), 1.0 / n_cls, dtype=np.float32),
        sol=np.full((w, h), EPS, dtype=np.float32),
        eol=np.full((w, h), EPS, dtype=np.float32),
        rd=rd,
    )


def _rd_row(d: int) -> np.ndarray:
    row = np.full(4, EPS, dtype=np.float32)
    row[d] = 1.0 - 3 * EPS
    return row


def _one_hot(n: int, idx0: int) -> np.ndarray:
    row = np.zeros(n, dtype=np.float32)
    row[idx0] = 1.0
    return row


def _set_rel(maps: PredictionMaps, grid: tuple[int, int], box: Box) -> None:
    rel = abs_to_rel(box, grid[0], grid[1], maps.shape)
    maps.box[grid[0] - 1, grid[1] - 1] = (rel.x_o, rel.y_o, rel.w_o, rel.h_o)


def _clamp_to_cell(x: float, lo: float, hi: float) -> float:
    # Valid centers for a cell lie in (lo, hi]; nudge off the open edge so
    # the jittered box keeps its grid under the ceil mapping.
    return min(max(x, lo + 1e-9 * (hi - lo)), hi)


def oracle_predict(page: "SyntheticPage", noise: OracleNoise) -> PredictionMaps:
    """Synthesize prediction maps for a page, then apply the noise model.

    Exact rendering: presence/one-hot class/relative box at every character
    grid, start/end-of-line flags at line endpoints, and reading-order rows
    along the deterministic staircase between consecutive characters.  All
    random draws come from a generator seeded with ``noise.seed``, so equal
    seeds give bit-identical maps.
    """
    shape = page.shape
    maps = _blank_maps(shape, page.n_cls)
    rng = np.random.default_rng(noise.seed)

    chars = list(page.chars)
    grids: dict[tuple[int, int], int] = {}
    for k, ch in enumerate(chars):
        g = grid_of(ch.box, shape)
        if g in grids:
            raise GridCollisionError(f"characters {grids[g]} and {k} share grid {g}")
        grids[g] = k

    lines: dict[int, list] = {}
    for ch in chars:
        lines.setdefault(ch.line, []).append(ch)
    for line in lines.values():
        line.sort(key=lambda c: c.pos)

    for line in lines.values():
        for a, b in zip(line, line[1:]):
            ga, gb = grid_of(a.box, shape), grid_of(b.box, shape)
            for g, d in staircase(ga, gb):
                if g != ga and g in grids:
                    raise GridCollisionError(
                        f"inter-character path {ga}->{gb} crosses character at {g}"
                    )
                maps.rd[g[0] - 1, g[1] - 1] = _rd_row(d)

    for ch in chars:
        i, j = grid_of(ch.box, shape)
        maps.dis[i - 1, j - 1] = 1.0 - EPS
        maps.cls[i - 1, j - 1] = _one_hot(page.n_cls, ch.cls_id - 1)
        _set_rel(maps, (i, j), ch.box)
    for line in lines.values():
        gi, gj = grid_of(line[0].box, shape)
        maps.sol[gi - 1, gj - 1] = 1.0 - EPS
        gi, gj = grid_of(line[-1].box, shape)
        maps.eol[gi - 1, gj - 1] = 1.0 - EPS

    _apply_noise(maps, chars, grids, noise, rng)
    return maps


def _apply_noise(
    maps: PredictionMaps,
    chars: list,
    grids: dict[tuple[int, int], int],
    noise: OracleNoise,
    rng: np.random.Generator,
) -> None:
    shape = maps.shape
    n = len(chars)
    if n:
        mean_size = float(
            np.mean([0.5 * (c.box.w * shape.img_w + c.box.h * shape.img_h) for c in chars])
        )
    else:
        mean_size = min(shape.cell_w, shape.cell_h)

    drop = rng.random(n) < noise.drop_p
    swap = rng.random(n) < noise.label_swap_p
    swap_to = rng.integers(0, max(maps.n_cls - 1, 1), size=n)
    jitter = rng.normal(0.0, 1.0, size=(n, 2)) * noise.jitter_sigma * mean_size
    size_fac = np.exp(rng.normal(0.0, 1.0, size=(n, 2)) * noise.size_sigma)

    for k, ch in enumerate(chars):
        i, j = grid_of(ch.box, shape)
        if drop[k]:
            maps.dis[i - 1, j - 1] = EPS
            continue
        if swap[k]:
            wrong = int(swap_to[k])
            if wrong >= ch.cls_id - 1:
                wrong += 1  # skip the true class
            wrong %= maps.n_cls
            maps.cls[i - 1, j - 1] = _one_hot(maps.n_cls, wrong)
        if noise.jitter_sigma > 0 or noise.size_sigma > 0:
            x = _clamp_to_cell(
                ch.box.x + float(jitter[k, 0]), (i - 1) * shape.cell_w, i * shape.cell_w
            )
            y = _clamp_to_cell(
                ch.box.y + float(jitter[k, 1]), (j - 1) * shape.cell_h, j * shape.cell_h
            )
            w = min(ch.box.w * float(size_fac[k, 0]), 1.0)
            h = min(ch.box.h * float(size_fac[k, 1]), 1.0)
            _set_rel(maps, (i, j), Box(x, y, w, h))

    if noise.spurious_p > 0:
        hits = rng.random((shape.w_g, shape.h_g)) < noise.spurious_p
        size_frac_w = mean_size / shape.img_w
        size_frac_h = mean_size / shape.img_h
        for i0, j0 in np.argwhere(hits):
            g = (int(i0) + 1, int(j0) + 1)
            if g in grids:
                continue
            maps.dis[i0, j0] = rng.uniform(0.55, 0.9)
            maps.cls[i0, j0] = _one_hot(maps.n_cls, int(rng.integers(0, maps.n_cls)))
            x_o, y_o = rng.uniform(0.3, 0.7, size=2)
            scale = rng.uniform(0.8, 1.2)
            maps.box[i0, j0] = (
                float(x_o),
                float(y_o),
                min(size_frac_w * scale, 1.0),
                min(size_frac_h * scale, 1.0),
            )

    if noise.dir_flip_p > 0:
        flips = rng.random((shape.w_g, shape.h_g)) < noise.dir_flip_p
        for i0, j0 in np.argwhere(flips):
            maps.rd[i0, j0] = _rd_row(int(rng.integers(0, 4)))


# ---------------------------------------------------------------------------
# Serialization: binary with a "PGNM" header, plus a JSON mirror accepted for
# hand-written fixtures.  Tensors are float32, row-major, written in the
# fixed order box, dis, cls, sol, eol, rd.
# ---------------------------------------------------------------------------

_TENSOR_ORDER = ("box", "dis", "cls", "sol", "eol", "rd")


def _tensor_shapes(w_g: int, h_g: int, n_cls: int) -> dict[str, tuple[int, ...]]:
    return {
        "box": (w_g, h_g, 4),
        "dis": (w_g, h_g),
        "cls": (w_g, h_g, n_cls),
        "sol": (w_g, h_g),
        "eol": (w_g, h_g),
        "rd": (w_g, h_g, 4),
    }


def save_maps(maps: PredictionMaps, path: str | Path) -> None:
    """Write maps to ``path``; ``.json`` selects the JSON mirror format."""
    path = Path(path)
    if path.suffix == ".json":
        doc = {
            "version": FORMAT_VERSION,
            "w_g": maps.shape.w_g,
            "h_g": maps.shape.h_g,
            "n_cls": maps.n_cls,
            "img_w": maps.shape.img_w,
            "img_h": maps.shape.img_h,
        }
        for name in _TENSOR_ORDER:
            doc[name] = getattr(maps, name).astype(np.float32).tolist()
        path.write_text(json.dumps(doc))
        return
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC,
                FORMAT_VERSION,
                maps.shape.w_g,
                maps.shape.h_g,
                maps.n_cls,
                float(maps.shape.img_w),
                float(maps.shape.img_h),
            )
        )
        for name in _TENSOR_ORDER:
            arr = np.ascontiguousarray(getattr(maps, name), dtype=np.float32)
            fh.write(arr.tobytes())


def load_maps(path: str | Path) -> PredictionMaps:
    """Read maps saved by :func:`save_maps` (binary or JSON, sniffed)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        return _load_binary(raw)
    head = raw.lstrip()[:1]
    if head == b"{":
        return _load_json(raw)
    raise MapFormatError(f"header: not a prediction-map file ({path})")


def _load_binary(raw: bytes) -> PredictionMaps:
    if len(raw) < _HEADER.size:
        raise MapFormatError("header: truncated file")
    magic, version, w_g, h_g, n_cls, img_w, img_h = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MapFormatError("header: bad magic")
    if version != FORMAT_VERSION:
        raise MapFormatError(f"header: unsupported version {version}")
    if w_g < 1 or h_g < 1 or n_cls < 1:
        raise MapFormatError("header: non-positive dimensions")
    if not (math.isfinite(img_w) and img_w > 0 and math.isfinite(img_h) and img_h > 0):
        raise MapFormatError("header: bad image dimensions")
    offset = _HEADER.size
    tensors: dict[str, np.ndarray] = {}
    for name, dims in _tensor_shapes(w_g, h_g, n_cls).items():
        count = int(np.prod(dims))
        end = offset + 4 * count
        if end > len(raw):
            raise MapFormatError(f"{name}: truncated tensor payload")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
        tensors[name] = arr.copy()
        offset = end
    if offset != len(raw):
        raise MapFormatError("payload: trailing bytes after tensors")
    maps = PredictionMaps(
        shape=GridShape(w_g, h_g, img_w, img_h), n_cls=n_cls, **tensors
    )
    maps.validate()
    return maps


def _load_json(raw: bytes) -> PredictionMaps:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MapFormatError(f"header: invalid JSON ({exc})") from exc
    try:
        w_g, h_g, n_cls = int(doc["w_g"]), int(doc["h_g"]), int(doc["n_cls"])
        img_w, img_h = float(doc["img_w"]), float(doc["img_h"])
    except KeyError as exc:
        raise MapFormatError(f"header: missing field {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    for name, dims in _tensor_shapes(w_g, h_g, n_cls).items():
        if name not in doc:
            raise MapFormatError(f"{name}: missing tensor")
        arr = np.asarray(doc[name], dtype=np.float32)
        if arr.shape != dims:
            raise MapFormatError(f"{name}: expected shape {dims}, got {arr.shape}")
        tensors[name] = arr
    maps = PredictionMaps(
        shape=GridShape(w_g, h_g, img_w, img_h), n_cls=n_cls, **tensors
    )
    maps.validate()
    return maps
