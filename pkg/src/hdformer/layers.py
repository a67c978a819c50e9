"""Parameter containers built on :mod:`hdformer.numerics`."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Walks its attributes to collect parameters in declaration order."""

    training = False

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            yield from _walk(val, prefix + name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def modules(self):
        yield self
        for val in vars(self).values():
            yield from _walk_modules(val)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(val, name):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, v in val.items():
            yield from _walk(v, f"{name}.{k}")


def _walk_modules(val):
    if isinstance(val, Module):
        yield from val.modules()
    elif isinstance(val, (list, tuple)):
        for v in val:
            yield from _walk_modules(v)
    elif isinstance(val, dict):
        for v in val.values():
            yield from _walk_modules(v)


def param(data):
    return Tensor(data, requires_grad=True)


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, c_in, c_out, rng, bias=True):
        self.weight = uniform_init(rng, c_in, (c_in, c_out))
        self.bias = param(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c):
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))

    def forward(self, x):
        return nx.layer_norm(x, self.gamma, self.beta)


class TemporalConv(Module):
    """Strided convolution along time, shared across joints."""

    def __init__(self, c_in, c_out, rng, kernel=5, stride=2):
        if kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.stride = stride
        self.weight = uniform_init(rng, kernel * c_in, (kernel, c_in, c_out))
        self.bias = param(np.zeros(c_out))

    def forward(self, x):
        return nx.temporal_conv(x, self.weight, self.bias, self.stride)


class MLP(Module):
    def __init__(self, c, rng, ratio=2, activation="gelu", dropout=0.0):
        self.fc1 = Linear(c, ratio * c, rng)
        self.fc2 = Linear(ratio * c, c, rng)
        self.activation = activation
        self.dropout = dropout

    def forward(self, x, train=False, rng=None):
        h = nx.activation(self.activation)(self.fc1(x))
        h = nx.dropout(h, self.dropout, train, rng)
        return self.fc2(h)
