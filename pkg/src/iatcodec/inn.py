"""Invertible transform building blocks: dense enhancement, affine coupling,
pixel-shuffle squeezes, and the grouped attention channel squeeze.

Couplings transform one channel half conditioned on the other, so the
inverse is closed-form; the scale factor is tanh-bounded to keep the
inverse division well away from overflow. Everything here except the dense
enhancement (a feed-forward residual on the encoder side) and the channel
squeeze with group size > 1 is exactly invertible.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, Parameter
from .tensor import Tensor

SCALE_BOUND = 2.0  # coupling scale factor lies in [e^-2, e^2]


def squeeze2(t: Tensor) -> Tensor:
    """Space-to-depth by 2: c x h x w -> 4c x h/2 x w/2 (pure permutation)."""
    return T.space_to_depth(t)


def unsqueeze2(t: Tensor) -> Tensor:
    """Exact inverse of squeeze2, bit for bit."""
    return T.depth_to_space(t)


class DenseBlock(Module):
    """Densely connected residual enhancement on the image.

    Each layer sees the concatenation of the input and all previous layer
    outputs; the final projection is zero-initialized so a fresh block is
    the identity.
    """

    def __init__(self, channels: int, layers: int, growth: int, rng, dtype=np.float32):
        if layers < 1:
            raise ValueError("dense block needs at least one layer")
        self.channels = channels
        self.convs = []
        c = channels
        for _ in range(layers - 1):
            self.convs.append(Conv2d(c, growth, rng=rng, dtype=dtype))
            c += growth
        self.proj = Conv2d(c, channels, zero_init=True, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"dense block expects {self.channels} channels, got {x.shape[1]}")
        feats = [x]
        for conv in self.convs:
            inp = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
            feats.append(T.leaky_relu(conv(inp)))
        cat = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
        return x + self.proj(cat)


class _Subnet(Module):
    """Two convs with a leaky ReLU between; final conv zero-initialized."""

    def __init__(self, c_in, c_out, hidden, rng, dtype):
        self.conv1 = Conv2d(c_in, hidden, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, c_out, zero_init=True, rng=rng, dtype=dtype)

    def __call__(self, x):
        return self.conv2(T.leaky_relu(self.conv1(x)))


class CouplingBlock(Module):
    """Affine coupling over channel halves.

    Active half maps to `a * exp(tanh(scale_net(p)) * SCALE_BOUND) +
    shift_net(p)` with p the passive half; `swap` flips which half is
    passive so stacked blocks transform both.
    """

    def __init__(self, channels: int, hidden: int, swap: bool, rng, dtype=np.float32):
        if channels % 2:
            raise ValueError(f"coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.half = channels // 2
        self.swap = swap
        self.scale_net = _Subnet(self.half, self.half, hidden, rng, dtype)
        self.shift_net = _Subnet(self.half, self.half, hidden, rng, dtype)

    def _split(self, t: Tensor):
        a = T.narrow(t, 1, 0, self.half)
        b = T.narrow(t, 1, self.half, self.half)
        return (b, a) if self.swap else (a, b)

    def _join(self, passive: Tensor, active: Tensor) -> Tensor:
        parts = [active, passive] if self.swap else [passive, active]
        return T.concat(parts, axis=1)

    def _scale(self, passive: Tensor) -> Tensor:
        return T.texp(T.ttanh(self.scale_net(passive)) * SCALE_BOUND)

    def forward(self, t: Tensor) -> Tensor:
        passive, active = self._split(t)
        out = active * self._scale(passive) + self.shift_net(passive)
        return self._join(passive, out)

    def inverse(self, t: Tensor) -> Tensor:
        passive, active = self._split(t)
        out = (active - self.shift_net(passive)) / self._scale(passive)
        return self._join(passive, out)


class ChannelSqueeze(Module):
    """Grouped softmax-attention average over channels, and its replication
    pseudo-inverse.

    With group size r = c/m, squeeze averages each group of r consecutive
    channels under learned softmax weights; unsqueeze replicates each
    squeezed channel r times, so squeeze(unsqueeze(y)) = y exactly and
    r = 1 makes both directions the identity.
    """

    def __init__(self, channels: int, squeezed: int, dtype=np.float32):
        if channels % squeezed:
            raise ValueError(f"{channels} channels not divisible into {squeezed} groups")
        self.channels = channels
        self.squeezed = squeezed
        self.group = channels // squeezed
        self.logits = Parameter(np.zeros(channels), dtype=dtype)

    def _weights(self) -> Tensor:
        w = T.softmax(T.reshape(self.logits, (self.squeezed, self.group)), axis=1)
        return T.reshape(w, (1, self.squeezed, self.group, 1, 1))

    def squeeze(self, t: Tensor) -> Tensor:
        n, c, h, w = t.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        if self.group == 1:
            return t
        grouped = T.reshape(t, (n, self.squeezed, self.group, h, w))
        return T.tsum(grouped * self._weights(), axis=2)

    def unsqueeze(self, t: Tensor) -> Tensor:
        n, m, h, w = t.shape
        if m != self.squeezed:
            raise ValueError(f"expected {self.squeezed} channels, got {m}")
        if self.group == 1:
            return t
        ones = Tensor(np.ones((1, 1, self.group, 1, 1), dtype=t.data.dtype))
        tiled = T.reshape(t, (n, m, 1, h, w)) * ones
        return T.reshape(tiled, (n, self.channels, h, w))
