"""Rectified camera-projector geometry.

The projector is treated as a second camera whose image plane holds the
reference pattern. After rectification a camera pixel ``(x, y)`` and its
pattern correspondence share the row ``y`` and differ only by the disparity
``d = x - x_p = f * b / Z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryDomainError(ValueError):
    """Raised for non-positive depth or disparity."""


@dataclass(frozen=True)
class RigModel:
    focal_px: float
    baseline_m: float
    width: int
    height: int
    d_min: float
    d_max: float
    downsample_factor: int = 8

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ValueError(f"focal_px must be > 0, got {self.focal_px}")
        if not self.baseline_m > 0:
            raise ValueError(f"baseline_m must be > 0, got {self.baseline_m}")
        if not (self.d_max > self.d_min >= 0):
            raise ValueError(f"need d_max > d_min >= 0, got [{self.d_min}, {self.d_max}]")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        k = self.downsample_factor
        if k < 1 or self.width % k or self.height % k:
            raise ValueError(
                f"downsample_factor {k} must be >= 1 and divide {self.width}x{self.height}"
            )

    @property
    def fb(self) -> float:
        """Focal length times baseline (px * m)."""
        return self.focal_px * self.baseline_m

    @property
    def z_range(self) -> tuple[float, float]:
        """Depth interval (near, far) covered by the disparity range."""
        far = np.inf if self.d_min == 0 else self.fb / self.d_min
        return self.fb / self.d_max, far

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0

    @property
    def reduced_shape(self) -> tuple[int, int]:
        k = self.downsample_factor
        return self.height // k, self.width // k

    def to_dict(self) -> dict:
        return {
            "focal_px": self.focal_px,
            "baseline_m": self.baseline_m,
            "width": self.width,
            "height": self.height,
            "d_min": self.d_min,
            "d_max": self.d_max,
            "downsample_factor": self.downsample_factor,
        }

    @classmethod
    def from_dict(cls, values: dict) -> "RigModel":
        return cls(
            focal_px=float(values["focal_px"]),
            baseline_m=float(values["baseline_m"]),
            width=int(values["width"]),
            height=int(values["height"]),
            d_min=float(values["d_min"]),
            d_max=float(values["d_max"]),
            downsample_factor=int(values.get("downsample_factor", 8)),
        )


def disparity_to_depth(d, rig: RigModel):
    """Depth in meters for disparity ``d`` (scalar or array, px)."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise GeometryDomainError("disparity must be > 0 (zero is a point at infinity)")
    z = rig.fb / d
    return float(z) if z.ndim == 0 else z


def depth_to_disparity(z, rig: RigModel):
    """Disparity in pixels for depth ``z`` (scalar or array, m)."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise GeometryDomainError("depth must be > 0")
    d = rig.fb / z
    return float(d) if d.ndim == 0 else d


def camera_to_pattern_x(x, d):
    """Pattern column seen at camera column ``x`` for disparity ``d``; the row is unchanged."""
    return np.subtract(x, d)
