"""Central finite-difference gradients, kept independent of the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, frozen_stop_gradients, no_grad


def numerical_grads(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Estimate d fn() / d p for each parameter by perturbing ``p.data`` in place."""
    out = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn().data.sum())
                flat[i] = orig - h
                down = float(fn().data.sum())
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            out.append(g)
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_with_frozen_stop_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5):
    """Analytic and numeric gradients of ``fn`` with stop-gradient values held fixed.

    Returns ``(analytic, numeric)`` lists. ``fn`` must call
    :func:`~million.tensor.stop_gradient` in the same order on every evaluation.
    """
    from .core import backward

    for p in params:
        p.grad = None
    with frozen_stop_gradients() as handle:
        backward(fn())
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        handle.replay()

        def evaluate():
            handle.rewind()
            return fn()

        numeric = numerical_grads(evaluate, params, h=h)
    return analytic, numeric
