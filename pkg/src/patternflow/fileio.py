"""Readers and writers for the on-disk formats: PFM, binary PGM and key=value text."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """A file on disk does not follow the expected format."""


def write_pfm(path, img) -> None:
    """Write a single-channel float image as little-endian PFM (scale -1.0).

    Rows are stored bottom-to-top, as the format requires.
    """
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("only single-channel PFM is supported")
    height, width = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(img)).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise DataFormatError(f"{path}: not a PFM file")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", f.readline())
        if not dims:
            raise DataFormatError(f"{path}: malformed PFM header")
        width, height = map(int, dims.groups())
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != width * height * channels:
        raise DataFormatError(f"{path}: expected {width * height * channels} floats, got {data.size}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pgm(path, img, maxval: int = 255) -> None:
    """Write integer data as binary PGM (P5); 16-bit samples are big-endian."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM is single-channel")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    height, width = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        f.write(img.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return the raw integer samples and ``maxval``."""
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval, separated by whitespace (comments allowed)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(raw, pos)
        if not m:
            raise DataFormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: only binary PGM (P5) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_keyvalue(path, items) -> None:
    """Write ``key=value`` lines in the given order. ``items`` is a dict or list of pairs."""
    pairs = items.items() if isinstance(items, dict) else items
    lines = [f"{k}={_fmt(v)}" for k, v in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_keyvalue(path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped. Order is kept."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
