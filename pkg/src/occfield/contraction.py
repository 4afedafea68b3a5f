"""Per-axis coordinate contraction between ego space and the cube (-1, 1)^3.

Inside the configured box the map is linear with slope ``alpha`` (in units of
the axis half-extent); outside it compresses as ``1 - a / (|r'| + b)`` so that
the whole real line lands in (-1, 1) with a C1 seam at ``|r'| = 1``.
"""
from __future__ import annotations

import math
import warnings
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, OutOfDomainError

AXES = {"x": 0, "y": 1, "z": 2}


def derive_constants(alpha):
    """Return ``(a, b)`` making the outer branch meet the inner one with equal slope.

    A ``Fraction`` argument is evaluated exactly and returns Fractions.
    """
    if not isinstance(alpha, Fraction):
        alpha = float(alpha)
        if not math.isfinite(alpha):
            raise InvalidParameterError(f"alpha must be finite, got {alpha!r}")
    if not 0 < alpha < 1:
        raise InvalidParameterError(f"alpha must lie in (0, 1), got {alpha!r}")
    a = (1 - alpha) ** 2 / alpha
    b = (1 - 2 * alpha) / alpha
    return a, b


def contract_normalized(x, alpha: float):
    """Scalar contraction of a coordinate already divided by its bound."""
    a, b = derive_constants(alpha)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    outer = ax > 1.0
    # np.where evaluates both branches; keep the outer denominator away from 0
    denom = np.where(outer, ax + b, 1.0)
    return np.where(outer, np.sign(x) * (1.0 - a / denom), alpha * x)


def contract_normalized_derivative(x, alpha: float):
    a, b = derive_constants(alpha)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    outer = ax > 1.0
    denom = np.where(outer, ax + b, 1.0)
    return np.where(outer, a / denom**2, alpha)


def invert_normalized(c, alpha: float):
    a, b = derive_constants(alpha)
    c = np.asarray(c, dtype=np.float64)
    ac = np.abs(c)
    if np.any(~np.isfinite(c)) or np.any(ac >= 1.0):
        raise OutOfDomainError("contracted coordinates must satisfy |c| < 1")
    outer = ac > alpha
    gap = np.where(outer, 1.0 - ac, 1.0)
    return np.where(outer, np.sign(c) * (a / gap - b), c / alpha)


@dataclass(frozen=True)
class ContractionParams:
    """Inside-region box plus the contraction threshold ``alpha``.

    ``inside_center`` defaults to the box midpoint and the per-axis half-extents
    are the largest distance from the center to either face, so an off-center
    override still keeps the whole box in the linear part.
    """

    alpha: float
    inside_min: tuple[float, float, float]
    inside_max: tuple[float, float, float]
    inside_center: tuple[float, float, float] | None = None
    _half: np.ndarray = field(init=False, repr=False, compare=False)
    _center: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        derive_constants(self.alpha)
        if self.alpha == 0.5:
            warnings.warn("alpha == 0.5 gives b == 0; the outer branch is untested there",
                          RuntimeWarning, stacklevel=3)
        lo = np.asarray(self.inside_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.inside_max, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidParameterError("inside bounds must be finite")
        if self.inside_center is None:
            center = 0.5 * (lo + hi)
        else:
            center = np.asarray(self.inside_center, dtype=np.float64).reshape(3)
        half = np.maximum(hi - center, center - lo)
        if np.any(half <= 0):
            raise InvalidParameterError("inside half extents must be positive")
        object.__setattr__(self, "inside_min", tuple(float(v) for v in lo))
        object.__setattr__(self, "inside_max", tuple(float(v) for v in hi))
        object.__setattr__(self, "_half", half)
        object.__setattr__(self, "_center", center)

    @property
    def a(self) -> float:
        return derive_constants(self.alpha)[0]

    @property
    def b(self) -> float:
        return derive_constants(self.alpha)[1]

    @property
    def half_extents(self) -> np.ndarray:
        return self._half.copy()

    @property
    def center(self) -> np.ndarray:
        return self._center.copy()

    @property
    def lengths(self) -> np.ndarray:
        """Edge lengths of the inside region (l_x, l_y, l_z)."""
        return 2.0 * self._half

    def to_dict(self) -> dict:
        out = {"alpha": self.alpha, "inside_min": list(self.inside_min),
               "inside_max": list(self.inside_max)}
        if self.inside_center is not None:
            out["inside_center"] = [float(v) for v in self._center]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ContractionParams":
        center = d.get("inside_center")
        return cls(alpha=float(d["alpha"]), inside_min=tuple(d["inside_min"]),
                   inside_max=tuple(d["inside_max"]),
                   inside_center=None if center is None else tuple(center))


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        return AXES[axis]
    return int(axis)


def contract_axis(r, params: ContractionParams, axis):
    i = _axis_index(axis)
    x = (np.asarray(r, dtype=np.float64) - params._center[i]) / params._half[i]
    return contract_normalized(x, params.alpha)


def invert_axis(c, params: ContractionParams, axis):
    i = _axis_index(axis)
    return invert_normalized(c, params.alpha) * params._half[i] + params._center[i]


def contract_point(p, params: ContractionParams):
    """Map ego points ``(..., 3)`` into the contracted cube."""
    x = (np.asarray(p, dtype=np.float64) - params._center) / params._half
    return contract_normalized(x, params.alpha)


def contract_point_jacobian(p, params: ContractionParams):
    """Diagonal of d contract_point / d p, shape ``(..., 3)``."""
    x = (np.asarray(p, dtype=np.float64) - params._center) / params._half
    return contract_normalized_derivative(x, params.alpha) / params._half


def invert_point(c, params: ContractionParams):
    return invert_normalized(c, params.alpha) * params._half + params._center
