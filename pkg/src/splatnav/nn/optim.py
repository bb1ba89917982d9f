"""Adam over named parameter sets."""

from __future__ import annotations

import numpy as np


class ParameterSet(dict):
    """Ordered ``name -> Tensor`` mapping of trainable leaves."""

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def arrays(self) -> dict:
        return {k: p.data for k, p in self.items()}

    def load(self, arrays: dict, strict=True):
        for k, p in self.items():
            if k not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {k!r}")
                continue
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ValueError(f"parameter {k!r}: shape {a.shape} != {p.shape}")
            p.data = a.astype(p.dtype).copy()


class Adam:
    def __init__(self, params: ParameterSet, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        adam_step(self.params, self, self.lr, self.betas, self.eps)


def adam_step(params: ParameterSet, state: Adam, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; parameters without gradients are left alone."""
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for k, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.dtype)
