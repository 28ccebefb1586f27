"""Pattern flow: horizontal-only Lucas-Kanade between consecutive frames.

The pattern can only slide along the rectified row when the scene moves, so
the flow has a single component ``u`` and the vertical one is not represented
at all. Flow is backward: ``I_t(x) ~ I_prev(x - u)``, which lets later stages
warp previous-frame quantities by gathering from ``x - u``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from ._kernels import lk_block_terms, upsample_flow
from .maps import as_array, like


@dataclass(frozen=True)
class FlowParams:
    window: int = 7  # reduced-resolution pixels
    iters: int = 5
    grad_floor: float = 1e-4
    u_max: float = 8.0  # reduced-resolution pixels
    factor: int = 8
    resid_tol: float = 0.05  # relative slack before a residual counts as increased

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd")
        if self.iters < 1 or self.factor < 1:
            raise ValueError("iters and factor must be >= 1")
        if self.resid_tol < 0:
            raise ValueError("resid_tol must be >= 0")


@dataclass
class FlowMap:
    """Horizontal flow in full-resolution px/frame, stored at reduced resolution."""

    u: np.ndarray
    valid: np.ndarray
    factor: int = 8

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def full_resolution(self) -> tuple[np.ndarray, np.ndarray]:
        """Bilinearly upsampled ``(u, valid)`` at full resolution.

        Invalid samples are left out of the interpolation (normalized
        convolution); a full-res pixel is valid when at least half of its
        interpolation weight comes from valid samples.
        """
        return upsample_flow(
            np.ascontiguousarray(self.u, dtype=np.float64), np.ascontiguousarray(self.valid, dtype=np.bool_), self.factor
        )


def downsample(image, factor: int):
    """Mean over non-overlapping ``factor`` x ``factor`` blocks."""
    img = as_array(image).astype(np.float64)
    h, w = img.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide {w}x{h}")
    if factor == 1:
        return like(image, img.copy())
    out = img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return like(image, out)


def shift_rows(img: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``img`` sampled at ``(x - u, y)`` with linear interpolation and edge clamping."""
    h, w = img.shape
    xs = np.arange(w, dtype=np.float64)[None, :] - u
    xs = np.clip(xs, 0.0, w - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2) if w > 1 else np.zeros_like(xs, np.intp)
    f = xs - x0
    rows = np.arange(h)[:, None]
    if w == 1:
        return img.copy()
    return img[rows, x0] * (1 - f) + img[rows, x0 + 1] * f


def compute_pattern_flow(I_t, I_prev, params: FlowParams = FlowParams(), mask=None) -> FlowMap:
    """Dense 1-D Lucas-Kanade flow with one estimate per ``factor`` x ``factor`` block.

    Each reduced-resolution pixel iterates

        u <- u + sum_w Ix * (I_prev(x - u) - I_t(x)) / sum_w Ix^2

    where the sums run over the full-resolution pixels of the ``window`` x
    ``window`` blocks around it, ``I_prev`` is re-warped every iteration and
    ``Ix`` is the central difference of the mean of ``I_t`` and the warped
    ``I_prev``. Averaging the images down first would wash out the dots, so
    the normal-equation terms are block-summed instead. A pixel is invalid if
    its window lacks gradient energy, ``|u|`` exceeds ``u_max`` (reduced px)
    or the windowed residual ends more than ``resid_tol`` (relative) above its
    zero-flow value. The slack matters on static areas, where the true
    optimum is zero and sensor noise nudges the converged residual up by a
    fraction of a percent.

    ``mask`` (full resolution, optional) restricts the sums to pixels known
    to carry pattern, e.g. where the previous disparity was valid. Unlit or
    shadowed areas hold only LCN-amplified noise and would otherwise bleed
    spurious motion into nearby blocks through the wide window.
    """
    a = np.ascontiguousarray(as_array(I_t), dtype=np.float64)
    b = np.ascontiguousarray(as_array(I_prev), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("frames must have equal shape")
    k = params.factor
    h, w = a.shape
    if h % k or w % k:
        raise ValueError(f"factor {k} must divide {w}x{h}")
    m = np.ones(a.shape, np.bool_) if mask is None else np.ascontiguousarray(mask, dtype=np.bool_)
    if m.shape != a.shape:
        raise ValueError("mask must match the frame shape")
    win = params.window
    limit = params.u_max * k

    def window_sum(x):
        return uniform_filter(x, win, mode="nearest") * (win * win)

    u = np.zeros((h // k, w // k))
    resid0 = None
    energy = np.zeros_like(u)
    for _ in range(params.iters):
        e, n, r = lk_block_terms(a, b, u, k, m)
        if resid0 is None:
            resid0 = window_sum(r)
        energy = window_sum(e)
        num = window_sum(n)
        step = np.divide(num, energy, out=np.zeros_like(num), where=energy > 0)
        # keep runaway pixels bounded; they are rejected below anyway
        u = np.clip(u + step, -2 * limit, 2 * limit)
    resid = window_sum(lk_block_terms(a, b, u, k, m)[2])

    valid = (energy >= params.grad_floor) & (np.abs(u) <= limit)
    valid &= resid <= resid0 * (1 + params.resid_tol) + 1e-12
    return FlowMap(np.where(valid, u, 0.0), valid, k)
