"""Parameter containers and the handful of layers the PointNet models need."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter tree: attributes that are Tensors with
    ``requires_grad`` or nested Modules (or lists of Modules) are discovered by
    :meth:`named_parameters`, in attribute-definition order."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map on the last axis, He-normal initialised."""

    def __init__(self, n_in, n_out, rng, name="linear"):
        scale = np.sqrt(2.0 / n_in)
        self.weight = Tensor(rng.normal(0.0, scale, size=(n_in, n_out)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalisation over all leading axes.

    ``momentum`` is the running-average decay; :func:`bn_decay` gives the
    step-wise schedule from 0.5 up to 0.99.
    """

    def __init__(self, n, eps=1e-5):
        self.gamma = Tensor(np.ones(n), requires_grad=True)
        self.beta = Tensor(np.zeros(n), requires_grad=True)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = 0.5
        self.eps = eps

    def forward(self, x):
        if self.training:
            y, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps)
            d = self.momentum
            self.running_mean = d * self.running_mean + (1 - d) * mu
            self.running_var = d * self.running_var + (1 - d) * var
            return y
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return T.add(T.mul(T.mul(T.sub(x, self.running_mean), inv), self.gamma), self.beta)


def bn_decay(step, start=0.5, every=20000, rate=0.5, clip=0.99):
    """Running-average decay: 1 - (1 - start) * rate**(step // every), capped at ``clip``."""
    return min(clip, 1.0 - (1.0 - start) * rate ** (step // every))


class MLP(Module):
    """Stack of Linear(+BN)+ReLU layers applied on the last axis.

    Applied to a ``[B, N, C]`` tensor this is the per-point shared MLP: every
    point row goes through the same weights.  ``final_activation=False`` leaves
    the last layer linear (used for regression/classification heads).
    """

    def __init__(self, widths, rng, batch_norm=False, final_activation=True, name="mlp"):
        self.layers = [Linear(a, b, rng, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        n = len(self.layers)
        act = [True] * n
        if not final_activation:
            act[-1] = False
        self.activate = act
        # BN on every trainable layer except a linear output layer
        self.norms = [BatchNorm(b) if (batch_norm and a) else None for b, a in zip(widths[1:], act)]

    @property
    def widths(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def forward(self, x, collect=False):
        outs = []
        for layer, act, bn in zip(self.layers, self.activate, self.norms):
            x = layer(x)
            if bn is not None:
                x = bn(x)
            if act:
                x = T.relu(x)
            outs.append(x)
        return (x, outs) if collect else x

    def modules(self):
        yield self
        for layer in self.layers:
            yield layer
        for bn in self.norms:
            if bn is not None:
                yield bn

    def named_parameters(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}layers.{i}.")
            if self.norms[i] is not None:
                yield from self.norms[i].named_parameters(f"{prefix}norms.{i}.")


def set_bn_momentum(module, momentum):
    for m in module.modules():
        if isinstance(m, BatchNorm):
            m.momentum = momentum


def shared_mlp(points, weights, biases, activation=True):
    """Functional shared MLP over a ``[N, C_in]`` (or ``[B, N, C_in]``) tensor."""
    x = points
    for w, b in zip(weights, biases):
        x = T.linear(x, w, b)
        if activation:
            x = T.relu(x)
    return x
