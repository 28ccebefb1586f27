"""Disparity error metrics: bad-pixel ratios o(t) and mean absolute error.

Sequence scores skip frame 0, which only holds the coarse initialization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fileio import DataFormatError, read_pfm, read_pgm
from .maps import DisparityMap

THRESHOLDS = (1.0, 2.0, 5.0)
CSV_COLUMNS = ("sequence", "ablation", "o1", "o2", "o5", "avg", "n_pixels", "n_frames")


class UndefinedMetricError(ValueError):
    """The evaluation mask selects no pixels (or no frames)."""


@dataclass
class MetricsRow:
    o1: float
    o2: float
    o5: float
    avg: float
    n_pixels: int
    n_frames: int
    extra: dict = field(default_factory=dict)  # o(t) for thresholds other than 1, 2, 5

    def as_dict(self) -> dict:
        return {"o1": self.o1, "o2": self.o2, "o5": self.o5, "avg": self.avg,
                "n_pixels": self.n_pixels, "n_frames": self.n_frames}


def _as_map(m) -> DisparityMap:
    if isinstance(m, DisparityMap):
        return m
    return DisparityMap.from_disparity(m)


def _eval_mask(pred: DisparityMap, gt: DisparityMap, mask) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if mask is None:
        mask = gt.valid
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ValueError("mask shape does not match")
        if (mask & ~gt.valid).any():
            raise ValueError("mask covers pixels without ground truth")
    if not mask.any():
        raise UndefinedMetricError("evaluation mask is empty")
    return mask


def _frame_counts(pred, gt, mask, thresholds, invalid_as_bad, invalid_penalty):
    """Raw counts for one frame: (n_mask, bad counts per t, abs-error sum, n in avg)."""
    pred = _as_map(pred)
    gt = _as_map(gt)
    mask = _eval_mask(pred, gt, mask)
    have = mask & pred.valid
    err = np.abs(pred.d - gt.d)[have]
    missing = int(mask.sum() - have.sum())
    bad = [int((err > t).sum()) + (missing if invalid_as_bad else 0) for t in thresholds]
    n_bad_base = int(mask.sum()) if invalid_as_bad else int(have.sum())
    total = float(err.sum())
    n_avg = err.size
    if invalid_penalty is not None:
        total += invalid_penalty * missing
        n_avg += missing
    return n_bad_base, bad, total, n_avg


def bad_pixel_ratio(pred, gt, mask=None, t: float = 1.0, invalid_as_bad: bool = True) -> float:
    """Percentage of masked pixels whose disparity error exceeds ``t``.

    ``mask`` defaults to the ground-truth validity and must lie inside it.
    Pixels the prediction leaves invalid count as bad unless
    ``invalid_as_bad`` is off, in which case they leave the denominator.
    """
    n, bad, _, _ = _frame_counts(pred, gt, mask, (t,), invalid_as_bad, None)
    if n == 0:
        raise UndefinedMetricError("no valid predictions inside the mask")
    return 100.0 * bad[0] / n


def avg_l1(pred, gt, mask=None, invalid_penalty: Optional[float] = None) -> float:
    """Mean absolute disparity error over the mask.

    Invalid predictions are skipped by default; with ``invalid_penalty`` set
    each contributes that many pixels of error instead. Returns ``nan`` when
    nothing inside the mask was predicted and no penalty is configured.
    """
    _, _, total, n = _frame_counts(pred, gt, mask, (), True, invalid_penalty)
    return total / n if n else float("nan")


def evaluate_maps(
    preds: Sequence,
    gts: Sequence,
    masks: Optional[Sequence] = None,
    thresholds: Sequence[float] = THRESHOLDS,
    pooled: bool = False,
    invalid_as_bad: bool = True,
    invalid_penalty: Optional[float] = None,
) -> MetricsRow:
    """Score a sequence of predictions, skipping frame 0.

    By default every frame gets equal weight (metrics are computed per frame
    and then averaged); ``pooled`` instead sums the counts over all frames.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions but {len(gts)} ground-truth maps")
    if masks is not None and len(masks) != len(gts):
        raise ValueError("one mask per frame is required")
    if len(gts) < 2:
        raise UndefinedMetricError("need at least two frames (frame 0 is not scored)")
    thresholds = tuple(float(t) for t in thresholds)
    per_frame_o, per_frame_avg = [], []
    pool_n = pool_navg = n_pixels = 0
    pool_bad = np.zeros(len(thresholds))
    pool_total = 0.0
    for t in range(1, len(gts)):
        mask = None if masks is None else masks[t]
        n, bad, total, n_avg = _frame_counts(preds[t], gts[t], mask, thresholds, invalid_as_bad, invalid_penalty)
        n_pixels += int(_eval_mask(_as_map(preds[t]), _as_map(gts[t]), mask).sum())
        pool_n += n
        pool_bad += bad
        pool_total += total
        pool_navg += n_avg
        per_frame_o.append([100.0 * b / n if n else np.nan for b in bad])
        per_frame_avg.append(total / n_avg if n_avg else np.nan)
    if pooled:
        o = 100.0 * pool_bad / pool_n if pool_n else np.full(len(thresholds), np.nan)
        avg = pool_total / pool_navg if pool_navg else float("nan")
    else:
        with np.errstate(invalid="ignore"):
            o = np.nanmean(np.array(per_frame_o), axis=0) if np.isfinite(per_frame_o).any() else np.full(len(thresholds), np.nan)
        finite = [a for a in per_frame_avg if np.isfinite(a)]
        avg = float(np.mean(finite)) if finite else float("nan")
    by_t = dict(zip(thresholds, (float(v) for v in o)))
    row = MetricsRow(
        o1=by_t.get(1.0, float("nan")),
        o2=by_t.get(2.0, float("nan")),
        o5=by_t.get(5.0, float("nan")),
        avg=float(avg),
        n_pixels=n_pixels,
        n_frames=len(gts) - 1,
    )
    row.extra = {t: v for t, v in by_t.items() if t not in (1.0, 2.0, 5.0)}
    return row


def load_prediction(pred_dir, t: int) -> DisparityMap:
    """Read ``disp_NNNN.pfm`` (and ``valid_NNNN.pgm`` / ``conf_NNNN.pfm`` if present)."""
    root = Path(pred_dir)
    dpath = root / f"disp_{t:04d}.pfm"
    if not dpath.exists():
        raise DataFormatError(f"missing prediction {dpath}")
    d = read_pfm(dpath).astype(np.float64)
    vpath = root / f"valid_{t:04d}.pgm"
    valid = read_pgm(vpath)[0] > 0 if vpath.exists() else np.isfinite(d)
    if valid.shape != d.shape:
        raise DataFormatError(f"{vpath}: shape does not match {dpath}")
    valid &= np.isfinite(d)
    cpath = root / f"conf_{t:04d}.pfm"
    conf = read_pfm(cpath).astype(np.float64) if cpath.exists() else valid.astype(np.float64)
    return DisparityMap(np.where(valid, d, 0.0), valid, np.clip(np.nan_to_num(conf), 0.0, 1.0))


def count_predictions(pred_dir) -> int:
    return len(list(Path(pred_dir).glob("disp_[0-9][0-9][0-9][0-9].pfm")))


def evaluate_sequence(pred_dir, gt_manifest, thresholds: Sequence[float] = THRESHOLDS, **kw) -> MetricsRow:
    """Score the predictions written to ``pred_dir`` against a sequence manifest.

    Raises :class:`ValueError` when the prediction count and the number of
    ground-truth frames differ.
    """
    n_pred = count_predictions(pred_dir)
    if not gt_manifest.gt:
        raise DataFormatError("manifest lists no ground truth")
    if n_pred != len(gt_manifest.gt):
        raise ValueError(f"{n_pred} predictions but {len(gt_manifest.gt)} ground-truth frames")
    preds = [load_prediction(pred_dir, t) for t in range(n_pred)]
    gts = [gt_manifest.load_gt(t) for t in range(n_pred)]
    return evaluate_maps(preds, gts, thresholds=thresholds, **kw)


def write_metrics_csv(path, rows) -> None:
    """``rows`` are ``(sequence, ablation, MetricsRow)`` triples."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for seq, abl, m in rows:
            w.writerow([seq, abl, f"{m.o1:.6f}", f"{m.o2:.6f}", f"{m.o5:.6f}", f"{m.avg:.6f}", m.n_pixels, m.n_frames])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
