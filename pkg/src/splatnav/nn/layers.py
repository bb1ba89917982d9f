"""Parameter-owning layers with seeded He initialization."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .optim import ParameterSet
from .tensor import Parameter


class Dense:
    def __init__(self, params: ParameterSet, name, n_in, n_out, rng, gain=2.0):
        self.W = params[f"{name}.W"] = Parameter(rng.normal(0, np.sqrt(gain / n_in), (n_in, n_out)))
        self.b = params[f"{name}.b"] = Parameter(np.zeros(n_out))

    def __call__(self, x):
        return F.dense(x, self.W, self.b)


class Conv2d:
    def __init__(self, params: ParameterSet, name, c_in, c_out, k, rng, stride=1, pad=0):
        fan_in = c_in * k * k
        self.W = params[f"{name}.W"] = Parameter(rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)))
        self.b = params[f"{name}.b"] = Parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return F.conv2d(x, self.W, self.b, self.stride, self.pad)
