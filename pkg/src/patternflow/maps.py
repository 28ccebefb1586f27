from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Frame:
    """One intensity image in [0, 1] (raw) or LCN units, with its frame index."""

    t: int
    intensity: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape


def as_array(image) -> np.ndarray:
    if isinstance(image, Frame):
        return image.intensity
    return np.asarray(image)


def like(template, data: np.ndarray):
    """Wrap ``data`` the same way ``template`` was wrapped."""
    if isinstance(template, Frame):
        return Frame(template.t, data)
    return data


@dataclass
class DisparityMap:
    """Per-pixel disparity (px) with validity and a confidence in [0, 1].

    Invalid pixels carry zero confidence; their disparity value is unspecified.
    """

    d: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.confidence = np.where(self.valid, np.asarray(self.confidence, dtype=np.float64), 0.0)
        if not (self.d.shape == self.valid.shape == self.confidence.shape):
            raise ValueError("d, valid and confidence must share one shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape

    @classmethod
    def from_disparity(cls, d, valid=None, confidence=1.0) -> "DisparityMap":
        d = np.asarray(d, dtype=np.float64)
        if valid is None:
            valid = np.isfinite(d)
        return cls(d, valid, np.broadcast_to(confidence, d.shape))

    @classmethod
    def invalid(cls, shape) -> "DisparityMap":
        return cls(np.zeros(shape), np.zeros(shape, bool), np.zeros(shape))

    def copy(self) -> "DisparityMap":
        return DisparityMap(self.d.copy(), self.valid.copy(), self.confidence.copy())

    def masked(self) -> np.ndarray:
        """Disparity with invalid pixels set to ``inf`` (the on-disk convention)."""
        return np.where(self.valid, self.d, np.inf)
