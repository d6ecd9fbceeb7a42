"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    h: float | None = None,
) -> np.ndarray:
    """Gradient of ``f`` at ``theta`` by central differences.

    ``h=None`` uses the per-coordinate step ``1e-6 * (1 + |theta_k|)``.
    ``f`` must be pure; ``theta`` is not modified.
    """
    theta = np.array(theta, dtype=np.float64)
    if h is not None and h <= 0:
        raise ValueError("step h must be positive")
    grad = np.empty_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        step = h if h is not None else 1e-6 * (1.0 + abs(flat[k]))
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(theta))
        flat[k] = orig - step
        fm = float(f(theta))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error ``|a - b|_inf / max(|a|_inf, |b|_inf)``.

    Two all-zero arrays compare as 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    if scale == 0.0:
        return diff
    return diff / scale
