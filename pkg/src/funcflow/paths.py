"""Conditional probability paths and their regression targets.

Two families are supported:

* ``PathKind.ot()``: displacement interpolation between coupled endpoints,
  ``f_t = (1 - t) f0 + t f1`` with constant velocity ``f1 - f0``.
* ``PathKind.ffm(sigma_min)``: the Gaussian conditional path of functional
  flow matching, ``f_t = (1 - (1 - s) t) f0 + t f1`` with velocity
  ``(1 - s) / (1 - (1 - s) t) * (t f1 - g) + f1`` at a point ``g``.

At ``sigma_min = 0`` the two coincide.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Field, check_same_grid, norm


@dataclass(frozen=True)
class PathKind:
    variant: str = "ot"
    sigma_min: float = 0.0

    def __post_init__(self):
        if self.variant not in ("ot", "ffm"):
            raise ValueError(f"unknown path variant {self.variant!r}")
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError(f"sigma_min must lie in [0, 1), got {self.sigma_min}")
        if self.variant == "ot" and self.sigma_min != 0.0:
            raise ValueError("the displacement path takes no sigma_min")

    @classmethod
    def ot(cls) -> PathKind:
        return cls("ot", 0.0)

    @classmethod
    def ffm(cls, sigma_min: float = 0.0) -> PathKind:
        return cls("ffm", sigma_min)

    @property
    def source_decay(self) -> float:
        """Coefficient ``1 - sigma_min`` multiplying ``t`` in the source weight."""
        return 1.0 - self.sigma_min


@dataclass(frozen=True)
class PathSample:
    t: float | np.ndarray
    f_t: Field
    v_target: Field


def _check_t(t):
    t_arr = np.asarray(t, dtype=np.float64)
    if not np.all((t_arr >= 0.0) & (t_arr <= 1.0)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t_arr


def _broadcast_t(t_arr: np.ndarray, values: np.ndarray) -> np.ndarray:
    # per-sample times broadcast over the grid axes
    if t_arr.ndim == 0:
        return t_arr
    return t_arr.reshape(t_arr.shape + (1, 1))


def interpolate_values(kind: PathKind, a0: np.ndarray, a1: np.ndarray, t):
    """Array-level interpolation: returns ``(f_t, v_target)`` values."""
    tb = _broadcast_t(_check_t(t), a0)
    if kind.variant == "ot":
        return (1.0 - tb) * a0 + tb * a1, a1 - a0
    decay = kind.source_decay
    f_t = (1.0 - decay * tb) * a0 + tb * a1
    # the closed-form velocity evaluated on the path reduces to f1 - (1 - s) f0
    return f_t, a1 - decay * a0


def interpolate(kind: PathKind, f0: Field, f1: Field, t) -> PathSample:
    check_same_grid(f0.grid, f1.grid)
    f_t, v = interpolate_values(kind, f0.values, f1.values, t)
    return PathSample(t, Field(f0.grid, f_t), Field(f0.grid, v))


def conditional_velocity(kind: PathKind, g: Field, f1: Field, t) -> Field:
    """Conditional velocity field at an arbitrary state ``g`` (not only on the path)."""
    check_same_grid(g.grid, f1.grid)
    tb = _broadcast_t(_check_t(t), g.values)
    if kind.variant == "ot":
        raise ValueError("the displacement velocity depends on the source, not on g")
    decay = kind.source_decay
    denom = 1.0 - decay * tb
    if np.any(denom == 0.0):
        raise ValueError("Gaussian path velocity is singular at t=1 when sigma_min=0")
    return Field(g.grid, decay / denom * (tb * f1.values - g.values) + f1.values)


def velocity_consistency_check(kind: PathKind, f0: Field, f1: Field, h: float = 1e-5) -> float:
    """Max over t in {0.1..0.9} of ``||(f_{t+h} - f_{t-h}) / 2h - v(t)||``."""
    worst = 0.0
    for t in np.linspace(0.1, 0.9, 9):
        plus = interpolate(kind, f0, f1, t + h).f_t.values
        minus = interpolate(kind, f0, f1, t - h).f_t.values
        fd = Field(f0.grid, (plus - minus) / (2.0 * h))
        sample = interpolate(kind, f0, f1, t)
        if kind.variant == "ffm":
            v = conditional_velocity(kind, sample.f_t, f1, t)
        else:
            v = sample.v_target
        dev = norm(Field(f0.grid, fd.values - v.values))
        worst = max(worst, float(np.max(dev)))
    return worst
