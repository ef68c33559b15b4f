"""Central finite differences for checking hand-written gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate of ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + step
        fp = f(x)
        x.flat[i] = orig - step
        fm = f(x)
        x.flat[i] = orig
        g.flat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def param_numeric_grads(loss_fn: Callable[[dict], float], params: dict[str, np.ndarray],
                        step: float = 1e-5) -> dict[str, np.ndarray]:
    """Finite-difference gradient of ``loss_fn(params)`` for every named array."""
    out = {}
    for name in params:
        def f(v, name=name):
            trial = dict(params)
            trial[name] = v
            return loss_fn(trial)

        out[name] = numeric_grad(f, params[name], step)
    return out
