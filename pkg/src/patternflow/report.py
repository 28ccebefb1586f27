"""Figures: per-frame error heatmaps, signed flow maps and convergence curves.

Everything renders off-screen through the Agg backend.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .maps import DisparityMap  # noqa: E402

INVALID_RGB = (0.5, 0.5, 0.5)


def error_map(pred: DisparityMap, gt: DisparityMap) -> np.ndarray:
    """``|pred - gt|`` where both are valid, ``nan`` elsewhere."""
    both = pred.valid & gt.valid
    return np.where(both, np.abs(pred.d - gt.d), np.nan)


def flow_rgb(u: np.ndarray, valid: Optional[np.ndarray] = None, limit: Optional[float] = None) -> np.ndarray:
    """Signed flow as an RGB image: red for ``u > 0``, blue for ``u < 0``, white at rest.

    The color scale is symmetric, ``[-limit, limit]``; by default ``limit`` is
    the largest valid ``|u|`` (at least 1 px so still scenes stay white).
    Invalid pixels are gray.
    """
    u = np.asarray(u, dtype=np.float64)
    valid = np.isfinite(u) if valid is None else np.asarray(valid, bool) & np.isfinite(u)
    if limit is None:
        limit = max(1.0, float(np.abs(u[valid]).max())) if valid.any() else 1.0
    norm = plt.Normalize(-limit, limit)
    rgb = plt.get_cmap("bwr")(norm(np.where(valid, u, 0.0)))[..., :3]
    rgb[~valid] = INVALID_RGB
    return rgb


def save_error_heatmap(pred: DisparityMap, gt: DisparityMap, path, vmax: float = 5.0, title: str = "") -> np.ndarray:
    """Write a colorbar heatmap of the absolute error; returns the error array."""
    err = error_map(pred, gt)
    fig, ax = plt.subplots(figsize=(6.4, 4.8), dpi=100)
    cmap = plt.get_cmap("magma").copy()
    cmap.set_bad(INVALID_RGB)
    im = ax.imshow(np.ma.masked_invalid(err), cmap=cmap, vmin=0.0, vmax=vmax, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="|d - d_gt| (px)")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return err


def save_flow_image(u, valid, path, limit: Optional[float] = None, scale: int = 1) -> np.ndarray:
    """Write :func:`flow_rgb` as a PNG, optionally upscaled by pixel repetition."""
    rgb = flow_rgb(u, valid, limit)
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    plt.imsave(path, rgb)
    return rgb


def save_convergence_plot(curves: Mapping[str, Sequence[float]], path, threshold: Optional[float] = 1.0) -> None:
    """Per-frame mean absolute error, one line per run (e.g. per ablation)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=100)
    for label, ys in curves.items():
        ax.plot(np.arange(len(ys)), ys, marker=".", label=label)
    if threshold is not None:
        ax.axhline(threshold, color="k", lw=0.8, ls="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("avg |d - d_gt| (px)")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
