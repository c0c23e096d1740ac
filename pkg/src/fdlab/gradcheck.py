"""Central finite differences against tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst-entry error relative to the tensor's largest gradient magnitude.

    The scale never drops below ``floor`` so vanishing gradients (say 1e-200)
    do not turn rounding noise into a relative error of 1.
    """
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter between tape and finite-difference gradients.

    ``loss_fn`` must rebuild the loss from scratch on every call (with any
    dropout masks held fixed).
    """
    for p in params.values():
        p.grad = None
    with T.Tape():
        loss = loss_fn()
        T.backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    def value() -> float:
        with T.no_grad():
            return loss_fn().item()

    out = {}
    for k, p in params.items():
        out[k] = rel_error(analytic[k], numeric_grad(value, p.data, eps))
        p.grad = None
    return out
