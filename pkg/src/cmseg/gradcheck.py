"""Central finite-difference gradient checking.

The numerical side only ever calls the forward computation, so it stays an
independent oracle for the taped backward rules.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def numerical_grad(f, x: T.Tensor, eps: float = 1e-3) -> np.ndarray:
    """d f / d x by central differences, perturbing one element at a time.

    `f` must return a scalar (python float or single-element tensor) and must
    not mutate its input.
    """
    saved = x.data
    work = saved.copy()
    x.data = work
    flat = work.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = np.float32(orig + eps)
        hi = _scalar(f())
        flat[i] = np.float32(orig - eps)
        lo = _scalar(f())
        flat[i] = orig
        grad[i] = (hi - lo) / (float(flat[i] + np.float32(eps)) - float(flat[i] - np.float32(eps)))
    x.data = saved
    return grad.reshape(saved.shape)


def _scalar(v) -> float:
    if isinstance(v, T.Tensor):
        return v.item()
    return float(v)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error relative to the gradient scale:
    max|a - n| / max(max|a|, max|n|, 1e-8)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_grads(build_loss, inputs, eps: float = 1e-3) -> float:
    """Run tape backward and finite differences over `inputs`, return the
    worst max_rel_err.

    `build_loss()` must construct the loss from the given input tensors from
    scratch (it is re-evaluated many times for the numeric side).
    """
    for t in inputs:
        t.zero_grad()
    loss = build_loss()
    T.backward(loss)
    worst = 0.0
    for t in inputs:
        ana = t.grad.copy()
        num = numerical_grad(build_loss, t, eps=eps)
        worst = max(worst, max_rel_err(ana, num))
    return worst
