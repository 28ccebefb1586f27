"""Pseudo-random dot reference pattern.

The pattern is a tile of ``period_rows`` rows that repeats vertically. Each
tile row must be locally unique: no two horizontal windows of ``patch_width``
pixels may be equal once quantized to 8 bits. That is the property that makes
correspondence search along a rectified row unambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fileio import read_keyvalue, read_pgm, write_keyvalue, write_pgm

MAX_ATTEMPTS = 64
_MAX_REPAIR_ROUNDS = 40


class PatternGenerationError(RuntimeError):
    def __init__(self, message: str, rows: list[int]):
        super().__init__(message)
        self.rows = rows


class UniquenessReport(NamedTuple):
    passed: bool
    first_collision: Optional[tuple[int, int, int]]  # (row, x1, x2)


@dataclass(frozen=True, eq=False)
class Pattern:
    intensity: np.ndarray  # (period_rows, width), float in [0, 1]
    patch_width: int
    dot_density: float = 0.0
    dot_radius_px: float = 0.0
    seed: Optional[int] = None
    _full_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        tile = np.array(self.intensity, dtype=np.float64)
        if tile.ndim != 2:
            raise ValueError("pattern tile must be 2-D")
        tile.setflags(write=False)
        object.__setattr__(self, "intensity", tile)

    @property
    def period_rows(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    def full(self, height: int) -> np.ndarray:
        """The tile repeated down to ``height`` rows."""
        if height not in self._full_cache:
            rows = np.arange(height) % self.period_rows
            img = self.intensity[rows]
            img.setflags(write=False)
            self._full_cache[height] = img
        return self._full_cache[height]

    def quantized(self) -> np.ndarray:
        return np.round(self.intensity * 255.0).astype(np.uint8)


def _render_dots(width, period_rows, cx, cy, radius):
    """Anti-aliased discs with vertical wrap-around; overlapping dots saturate at 1."""
    tile = np.zeros((period_rows, width))
    reach = int(np.ceil(radius + 1))
    offs = np.arange(-reach, reach + 1)
    for x0, y0 in zip(cx, cy):
        xs = np.floor(x0).astype(int) + offs
        ys = np.floor(y0).astype(int) + offs
        xs = xs[(xs >= 0) & (xs < width)]
        dist = np.hypot(xs[None, :] - x0, ys[:, None] - y0)
        cover = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        rows = ys % period_rows
        np.maximum.at(tile, (rows[:, None], xs[None, :]), cover)
    return tile


def _row_collisions(qrow: np.ndarray, patch_width: int) -> Optional[tuple[int, int]]:
    """First (x1, x2) with equal windows in one quantized row, scanning x2 left to right."""
    seen = {}
    for x, win in enumerate(sliding_window_view(qrow, patch_width)):
        key = win.tobytes()
        if key in seen:
            return seen[key], x
        seen[key] = x
    return None


def _all_row_collisions(q: np.ndarray, patch_width: int) -> dict[int, tuple[int, int]]:
    out = {}
    for y in range(q.shape[0]):
        hit = _row_collisions(q[y], patch_width)
        if hit is not None:
            out[y] = hit
    return out


def verify_row_uniqueness(p: Pattern) -> UniquenessReport:
    if p.patch_width > p.width:
        raise ValueError("patch_width exceeds pattern width")
    q = p.quantized()
    for y in range(q.shape[0]):
        hit = _row_collisions(q[y], p.patch_width)
        if hit is not None:
            return UniquenessReport(False, (y, hit[0], hit[1]))
    return UniquenessReport(True, None)


def generate_pattern(
    seed: int,
    width: int = 640,
    period_rows: int = 64,
    dot_density: float = 0.15,
    dot_radius_px: float = 1.5,
    patch_width: int = 11,
    max_attempts: int = MAX_ATTEMPTS,
) -> Pattern:
    """Seeded dot pattern that passes :func:`verify_row_uniqueness`.

    Dots are scattered uniformly at random, then rows that still contain
    duplicate windows (typically empty stretches) receive extra dots at random
    positions inside the offending window until the row is unique. If repair
    stalls, the whole tile is redrawn from the next seed in the sequence, up
    to ``max_attempts`` times. ``dot_density`` is the covered fraction of the
    initial scatter. Repair only adds dots, and since at most one window per row may be dark
    the final coverage ends up well above low densities (about 0.34 for 0.15
    with the default radius and patch width).
    """
    if dot_density < 0 or dot_density >= 0.6:
        raise ValueError(f"dot_density must be in (0, 0.6), got {dot_density}")
    if patch_width < 5:
        raise ValueError("patch_width must be >= 5")
    if patch_width > width:
        raise ValueError("patch_width exceeds width")
    if dot_radius_px <= 0:
        raise ValueError("dot_radius_px must be > 0")

    n_dots = int(round(dot_density * width * period_rows / (np.pi * dot_radius_px**2)))
    bad_rows: list[int] = []
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        cx = list(rng.uniform(0, width, n_dots))
        cy = list(rng.uniform(0, period_rows, n_dots))
        tile = _render_dots(width, period_rows, cx, cy, dot_radius_px)
        q = np.round(tile * 255).astype(np.uint8)
        collisions = _all_row_collisions(q, patch_width)
        rounds = 0
        # an empty pattern is left as is: there is nothing to repair from
        while collisions and n_dots > 0 and rounds < _MAX_REPAIR_ROUNDS:
            # anywhere inside the later window; a fixed offset would fill gaps
            # at regular spacing and make the rows self-similar
            new_x = [x2 + rng.uniform(0, patch_width) for _, x2 in collisions.values()]
            new_y = [y + rng.uniform(-0.5, 0.5) for y in collisions]
            cx += new_x
            cy += new_y
            tile = np.maximum(tile, _render_dots(width, period_rows, new_x, new_y, dot_radius_px))
            q = np.round(tile * 255).astype(np.uint8)
            collisions = _all_row_collisions(q, patch_width)
            rounds += 1
        if not collisions:
            # store the 8-bit levels so a saved and reloaded pattern is identical
            return Pattern(q / 255.0, patch_width, dot_density, dot_radius_px, seed)
        bad_rows = sorted(collisions)
    raise PatternGenerationError(
        f"row uniqueness unsatisfiable after {max_attempts} attempts; offending rows {bad_rows[:10]}",
        bad_rows,
    )


def sample_pattern(p: Pattern, x_p, y):
    """Bilinear sample of the tile, clamped horizontally and periodic vertically."""
    x = np.clip(np.asarray(x_p, dtype=np.float64), 0.0, p.width - 1)
    y = np.mod(np.asarray(y, dtype=np.float64), p.period_rows)
    x0 = np.minimum(np.floor(x).astype(np.intp), p.width - 2)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0
    y1 = (y0 + 1) % p.period_rows
    y0 = y0 % p.period_rows
    t = p.intensity
    top = t[y0, x0] * (1 - fx) + t[y0, x0 + 1] * fx
    bot = t[y1, x0] * (1 - fx) + t[y1, x0 + 1] * fx
    out = top * (1 - fy) + bot * fy
    return float(out) if out.ndim == 0 else out


def save_pattern(p: Pattern, path) -> Path:
    """Write the tile as 8-bit PGM plus a ``.txt`` sidecar header. Returns the sidecar path."""
    path = Path(path)
    pgm = path.with_suffix(".pgm")
    header = path.with_suffix(".txt")
    write_pgm(pgm, p.quantized(), 255)
    write_keyvalue(
        header,
        [
            ("image", pgm.name),
            ("period_rows", p.period_rows),
            ("width", p.width),
            ("patch_width", p.patch_width),
            ("seed", p.seed if p.seed is not None else ""),
            ("density", p.dot_density),
            ("dot_radius_px", p.dot_radius_px),
        ],
    )
    return header


def load_pattern(path) -> Pattern:
    """Load from the sidecar header (or the PGM next to it)."""
    header = Path(path).with_suffix(".txt")
    meta = read_keyvalue(header)
    raw, maxval = read_pgm(header.parent / meta["image"])
    if raw.shape[0] != int(meta["period_rows"]):
        raise ValueError(f"{header}: tile has {raw.shape[0]} rows, header says {meta['period_rows']}")
    seed = int(meta["seed"]) if meta.get("seed") else None
    return Pattern(
        raw.astype(np.float64) / maxval,
        int(meta["patch_width"]),
        float(meta.get("density", 0.0)),
        float(meta.get("dot_radius_px", 0.0)),
        seed,
    )
