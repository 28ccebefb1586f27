from __future__ import annotations

import numpy as np
import cv2

from .maps import as_array, like

LCN_WINDOW = 9
LCN_EPS = 1e-3


def lcn(image, window: int = LCN_WINDOW, eps: float = LCN_EPS):
    """Local contrast normalization: ``(I - mean) / (std + eps)`` over a square window.

    Window statistics replicate the border pixels. Accepts a :class:`Frame` or
    a 2-D array and returns the same kind.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    img = as_array(image).astype(np.float64)
    mean = box_mean(img, window)
    sq = box_mean(img * img, window)
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    return like(image, (img - mean) / (std + eps))


def box_mean(img: np.ndarray, size: int) -> np.ndarray:
    """Mean over a ``size`` x ``size`` window centered on each pixel, edges replicated."""
    return cv2.blur(img, (size, size), borderType=cv2.BORDER_REPLICATE)
