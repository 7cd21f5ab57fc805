"""Analytic velocity models with the same interface as :class:`funcflow.fno.FNO`.

They stand in for the neural operator in trainer and sampler tests, where the
exact answer is known in closed form.
"""
from __future__ import annotations

import numpy as np

from .grid import GridSpec


def _tb(t, values):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1, 1)) if t.ndim else t


class AffineProbe:
    """``u(t, f) = a f + b t + c`` with scalar parameters: a convex regression problem."""

    def init(self, seed: int = 0, zero_output: bool = False) -> dict[str, np.ndarray]:
        return {"a": np.zeros(1), "b": np.zeros(1), "c": np.zeros(1)}

    def velocity(self, params, t, values: np.ndarray, grid: GridSpec) -> np.ndarray:
        return params["a"][0] * values + params["b"][0] * _tb(t, values) + params["c"][0]

    def loss_and_grad_values(self, params, t, f_t, v_target, grid: GridSpec):
        resid = self.velocity(params, t, f_t, grid) - v_target
        b = f_t.shape[0]
        loss = grid.cell_area * float(np.sum(resid * resid)) / b
        g = (2.0 * grid.cell_area / b) * resid
        tb = np.broadcast_to(_tb(t, f_t), f_t.shape)
        grads = {
            "a": np.array([np.sum(g * f_t)]),
            "b": np.array([np.sum(g * tb)]),
            "c": np.array([np.sum(g)]),
        }
        return loss, grads


class CountingModel:
    """Wraps a velocity callable ``fn(t, values)`` and counts evaluations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def init(self, seed: int = 0, zero_output: bool = False):
        return {}

    def velocity(self, params, t, values: np.ndarray, grid: GridSpec) -> np.ndarray:
        self.calls += 1
        return np.asarray(self.fn(t, values), dtype=np.float64) * np.ones_like(values)


def constant_probe(c: float) -> CountingModel:
    return CountingModel(lambda t, f: np.full_like(f, c))


def exponential_probe() -> CountingModel:
    """``u(t, f) = f``; the flow is ``f0 * exp(t)``."""
    return CountingModel(lambda t, f: f)
