"""Sequence manifest: a key=value text file naming the rig, the pattern and the frame files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .fileio import DataFormatError, read_keyvalue, read_pfm, read_pgm, write_keyvalue
from .geometry import RigModel
from .maps import DisparityMap, Frame

_RIG_KEYS = ("focal_px", "baseline_m", "width", "height", "d_min", "d_max", "downsample_factor")


@dataclass
class SequenceManifest:
    rig: RigModel
    pattern: str  # pattern sidecar, relative to root
    frames: list[str]
    gt: list[str] = field(default_factory=list)
    seed: int = 0
    root: Path = Path(".")
    extra: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    def load_frame(self, t: int) -> Frame:
        try:
            raw, maxval = read_pgm(self.path(self.frames[t]))
        except (OSError, DataFormatError) as exc:
            raise DataFormatError(f"frame {t}: {exc}") from exc
        if raw.shape != (self.rig.height, self.rig.width):
            raise DataFormatError(f"frame {t}: size {raw.shape[::-1]} does not match the rig")
        return Frame(t, raw.astype(np.float64) / maxval)

    def load_gt(self, t: int) -> DisparityMap:
        d = read_pfm(self.path(self.gt[t])).astype(np.float64)
        valid = np.isfinite(d)
        return DisparityMap(np.where(valid, d, 0.0), valid, valid.astype(np.float64))


def write_manifest(m: SequenceManifest, path) -> None:
    items = [(k, v) for k, v in m.rig.to_dict().items()]
    items += [("pattern", m.pattern), ("seed", m.seed), ("n_frames", m.n_frames)]
    items += list(m.extra.items())
    items += [(f"frame_{t:04d}", f) for t, f in enumerate(m.frames)]
    items += [(f"gt_{t:04d}", g) for t, g in enumerate(m.gt)]
    write_keyvalue(path, items)


def read_manifest(path) -> SequenceManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    kv = read_keyvalue(path)
    missing = [k for k in _RIG_KEYS[:-1] + ("pattern",) if k not in kv]
    if missing:
        raise DataFormatError(f"{path}: missing keys {missing}")
    rig = RigModel.from_dict({k: kv[k] for k in _RIG_KEYS if k in kv})
    frames = [v for k, v in kv.items() if k.startswith("frame_")]
    gt = [v for k, v in kv.items() if k.startswith("gt_")]
    if "n_frames" in kv and int(kv["n_frames"]) != len(frames):
        raise DataFormatError(f"{path}: n_frames={kv['n_frames']} but {len(frames)} frame entries")
    if gt and len(gt) != len(frames):
        raise DataFormatError(f"{path}: {len(frames)} frames but {len(gt)} ground-truth maps")
    reserved = set(_RIG_KEYS) | {"pattern", "seed", "n_frames"}
    extra = {
        k: v for k, v in kv.items() if k not in reserved and not k.startswith(("frame_", "gt_"))
    }
    return SequenceManifest(
        rig=rig,
        pattern=kv["pattern"],
        frames=frames,
        gt=gt,
        seed=int(kv.get("seed", 0)),
        root=path.parent,
        extra=extra,
    )


def manifest_pattern_path(m: SequenceManifest) -> Path:
    return m.path(m.pattern)


def find_manifest(path) -> Optional[Path]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.txt"
    return p if p.exists() else None
