"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, backward


@dataclass
class GradCheckResult:
    name: str
    max_abs_err: float
    max_rel_err: float
    worst_index: tuple
    passed: bool


def numeric_grad(f, arr, eps=1e-6):
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def compare(analytic, numeric, rtol=1e-4, atol=1e-6):
    """Elementwise pass iff ``|a - n| <= max(rtol * max(|a|, |n|), atol)``."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = diff <= np.maximum(rtol * scale, atol)
    rel = diff / np.maximum(scale, 1e-300)
    worst = np.unravel_index(np.argmax(diff), diff.shape) if diff.size else ()
    return bool(ok.all()), float(diff.max(initial=0.0)), float(rel.max(initial=0.0)), tuple(int(i) for i in worst)


def check(loss_fn, tensors, eps=1e-6, rtol=1e-4, atol=1e-6, names=None):
    """Gradient-check a scalar ``loss_fn()`` with respect to each tensor.

    ``loss_fn`` must build its graph from the given (``requires_grad``)
    tensors every call.  Returns one :class:`GradCheckResult` per tensor.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value():
        return float(loss_fn().data)

    results = []
    for i, (t, a) in enumerate(zip(tensors, analytic)):
        n = numeric_grad(value, t.data, eps)
        ok, ab, rel, worst = compare(a, n, rtol, atol)
        label = names[i] if names else (t.name or f"input{i}")
        results.append(GradCheckResult(label, ab, rel, worst, ok))
    return results
