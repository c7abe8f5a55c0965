"""Parameter containers and the conv building block used by every subnet."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module: parameters discovered by walking attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    """3x3 (or any odd k) convolution with He-normal init.

    `zero_init` zeroes weight and bias so a freshly built network computes
    the identity wherever the layer feeds a residual or a coupling subnet.
    """

    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, pad_mode="zeros",
                 zero_init=False, rng=None, dtype=np.float32):
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.pad_mode = pad_mode
        if zero_init:
            w = np.zeros((c_out, c_in, k, k))
        else:
            std = np.sqrt(2.0 / (c_in * k * k))
            w = rng.normal(0.0, std, size=(c_out, c_in, k, k))
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(c_out), dtype=dtype)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, pad_mode=self.pad_mode)
