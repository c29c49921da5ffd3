"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
) -> dict[str, float]:
    """Max elementwise relative error per parameter, analytic vs numeric."""
    named = params if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    for p in named.values():
        p.zero_grad()
    backward(fn())
    report = {}
    for name, p in named.items():
        analytic = p.grad.copy()
        numeric = numeric_grad(fn, p, step)
        report[name] = float(relative_error(analytic, numeric).max()) if p.data.size else 0.0
    return report
