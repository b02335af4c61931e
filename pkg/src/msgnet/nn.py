"""Small layer and optimizer layer on top of the tensor engine.

Parameters are initialized uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]
from a caller-supplied seeded generator, so every run is reproducible.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_param(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(
        rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True
    )


class Module:
    """Base class; discovers parameters from attribute insertion order."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"checkpoint shape {arr.shape} != parameter {name} "
                    f"shape {p.data.shape}"
                )
            p.data = arr.copy()


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, k, stride=1, pad=None, dtype=np.float32):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        fan_in = in_ch * k * k
        self.weight = uniform_param(rng, (out_ch, in_ch, k, k), fan_in, dtype)
        self.bias = uniform_param(rng, (out_ch,), fan_in, dtype)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, rng, in_f, out_f, bias=True, dtype=np.float32):
        self.weight = uniform_param(rng, (in_f, out_f), in_f, dtype)
        self.bias = uniform_param(rng, (out_f,), in_f, dtype) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class SGD:
    """Plain SGD with momentum and optional linear warm-up of the rate."""

    def __init__(self, params, lr=0.01, momentum=0.938, warmup_steps=0):
        self.params = list(params)
        self.base_lr = lr
        self.momentum = momentum
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self):
        if self.warmup_steps > 0 and self.step_count < self.warmup_steps:
            return self.base_lr * (self.step_count + 1) / self.warmup_steps
        return self.base_lr

    def step(self):
        lr = self.current_lr()
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - lr * v
        self.step_count += 1

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
