"""Quantization, the hyperprior networks, and Gaussian rate estimates.

The latent is quantized by rounding at test time and by adding U(-0.5, 0.5)
noise during training. Rates come from the probability a Gaussian assigns
to the unit-width bin around each (possibly continuous) value; the same
integral drives both the differentiable training estimate and the coder's
frequency tables, which is what keeps the estimate tied to real file sizes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from . import tensor as T
from .nn import Conv2d, Module, Parameter
from .tensor import Tensor

SIGMA_MIN = 0.11
BITS_CAP = 50.0
_P_FLOOR = 2.0 ** -BITS_CAP
_INV_LN2 = 1.0 / math.log(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(values)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(y, mode: str, rng=None):
    """Quantize a latent: 'round' for coding, 'noise' for training.

    Noise mode keeps the graph differentiable (the perturbation is a
    constant); round mode works on plain arrays and returns exact integers.
    """
    if mode == "round":
        data = y.data if isinstance(y, Tensor) else y
        return round_half_away(data)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise mode needs an rng")
        t = T.as_tensor(y)
        noise = rng.uniform(-0.5, 0.5, size=t.shape).astype(t.data.dtype)
        # keep |noise| strictly below 0.5 after any dtype rounding
        eps = np.finfo(t.data.dtype).eps
        np.clip(noise, -0.5 + eps, 0.5 - eps, out=noise)
        return t + Tensor(noise)
    raise ValueError(f"unknown quantization mode '{mode}'")


def _phi(x):
    return np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gaussian_bin_probability(values: np.ndarray, mean: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Probability mass a N(mean, sigma^2) puts on the unit bin at `values`.

    Evaluated with both CDF arguments on the same tail so nothing cancels
    when the value sits far from the mean.
    """
    d = np.abs(np.asarray(values, dtype=np.float64) - mean)
    return ndtr((0.5 - d) / sigma) - ndtr((-0.5 - d) / sigma)


def gaussian_bits(values, mean, sigma) -> Tensor:
    """Per-element rate in bits, -log2 of the unit-bin mass, capped at 50.

    Differentiable in all three inputs; broadcasting follows numpy rules
    (used with per-channel priors for the side information).
    """
    v = T.as_tensor(values)
    mu = T.as_tensor(mean)
    sg = T.as_tensor(sigma)
    if np.min(sg.data) < SIGMA_MIN - 1e-9:
        raise ValueError(f"sigma below floor {SIGMA_MIN}")
    vd = v.data.astype(np.float64)
    md = mu.data.astype(np.float64)
    sd = sg.data.astype(np.float64)
    diff = vd - md
    d = np.abs(diff)
    hi = (0.5 - d) / sd
    lo = (-0.5 - d) / sd
    p_raw = ndtr(hi) - ndtr(lo)
    live = p_raw > _P_FLOOR
    p = np.maximum(p_raw, _P_FLOOR)
    bits = (-np.log(p) * _INV_LN2).astype(v.data.dtype)

    def backward(g):
        scale = np.where(live, -_INV_LN2 / p, 0.0) * g
        dp_dd = (_phi(lo) - _phi(hi)) / sd
        dp_ddiff = np.sign(diff) * dp_dd  # dd/ddiff = sign(diff)
        dp_dsigma = (lo * _phi(lo) - hi * _phi(hi)) / sd
        if v.requires_grad:
            T._accum(v, T._unbroadcast(scale * dp_ddiff, v.shape).astype(v.data.dtype, copy=False))
        if mu.requires_grad:
            T._accum(mu, T._unbroadcast(-scale * dp_ddiff, mu.shape).astype(mu.data.dtype, copy=False))
        if sg.requires_grad:
            T._accum(sg, T._unbroadcast(scale * dp_dsigma, sg.shape).astype(sg.data.dtype, copy=False))

    return T.make_op(bits, (v, mu, sg), backward, "gaussian_bits")


class HyperAnalysis(Module):
    """|y| -> side latent z via two stride-2 convs."""

    def __init__(self, latent_channels: int, hyper_channels: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(latent_channels, hyper_channels, stride=2, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hyper_channels, hyper_channels, stride=2, rng=rng, dtype=dtype)

    def __call__(self, y: Tensor) -> Tensor:
        return self.conv2(T.leaky_relu(self.conv1(T.tabs(y))))


class HyperSynthesis(Module):
    """z -> (mean, sigma) shaped like y; sigma is softplus-floored.

    Upsamples by nearest-neighbor doubling plus conv, then crops to the
    latent's spatial size so odd latent extents round-trip.
    """

    def __init__(self, latent_channels: int, hyper_channels: int, rng, dtype=np.float32):
        self.latent_channels = latent_channels
        hidden = 2 * hyper_channels
        self.conv1 = Conv2d(hyper_channels, hidden, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, 2 * latent_channels, rng=rng, dtype=dtype)

    def __call__(self, z: Tensor, latent_hw) -> tuple[Tensor, Tensor]:
        h = T.leaky_relu(self.conv1(T.upsample_nearest2(z)))
        out = self.conv2(T.upsample_nearest2(h))
        lh, lw = latent_hw
        if out.shape[2] < lh or out.shape[3] < lw:
            raise ValueError(f"hyper synthesis output {out.shape[2:]} smaller than latent {latent_hw}")
        if out.shape[2] != lh or out.shape[3] != lw:
            out = T.narrow(T.narrow(out, 2, 0, lh), 3, 0, lw)
        mean = T.narrow(out, 1, 0, self.latent_channels)
        raw = T.narrow(out, 1, self.latent_channels, self.latent_channels)
        sigma = T.softplus(raw) + SIGMA_MIN
        return mean, sigma


class ChannelPrior(Module):
    """Learned per-channel Gaussian for the side latent."""

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.mean = Parameter(np.zeros(channels), dtype=dtype)
        self.raw_sigma = Parameter(np.zeros(channels), dtype=dtype)

    def params(self) -> tuple[Tensor, Tensor]:
        shape = (1, self.channels, 1, 1)
        mean = T.reshape(self.mean, shape)
        sigma = T.softplus(T.reshape(self.raw_sigma, shape)) + SIGMA_MIN
        return mean, sigma

    def params_np(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.mean.data.astype(np.float64)
        sigma = np.logaddexp(0.0, self.raw_sigma.data.astype(np.float64)) + SIGMA_MIN
        return mean, sigma

    def bits(self, z_hat: Tensor) -> Tensor:
        mean, sigma = self.params()
        return gaussian_bits(z_hat, mean, sigma)


def _ceil_half(v: int) -> int:
    return -(-v // 2)


def hyper_latent_shape(latent_hw) -> tuple[int, int]:
    """Spatial size of z for a given latent size (two ceil-halvings)."""
    h, w = latent_hw
    return _ceil_half(_ceil_half(h)), _ceil_half(_ceil_half(w))
