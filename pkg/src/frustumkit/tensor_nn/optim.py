"""Adam with a step-wise halving learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class StepDecay:
    """``lr(step) = base_lr * factor ** (step // every)``."""

    base_lr: float = 1e-3
    every: int = 2000
    factor: float = 0.5

    def __call__(self, step):
        return self.base_lr * self.factor ** (step // self.every)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update of ``params`` (dict name -> ndarray) in place.

    Missing or ``None`` gradients are treated as zero, so the moments still
    decay for parameters that did not participate in this step.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    """Adam over a list of named Tensors, reading their ``.grad``."""

    def __init__(self, named_params, schedule=None, betas=(0.9, 0.999), eps=1e-8):
        self.named = list(named_params)
        self.schedule = schedule or StepDecay()
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    @property
    def lr(self):
        return self.schedule(self.state.step)

    def step(self):
        lr = self.lr
        params = {name: t.data for name, t in self.named}
        grads = {name: t.grad for name, t in self.named}
        adam_step(params, grads, self.state, lr, self.betas, self.eps)
        return lr

    def zero_grad(self):
        for _, t in self.named:
            t.grad = None
