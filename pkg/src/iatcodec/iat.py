"""Quality-level maps and the invertible activation transform.

A quality level is a per-pixel map in [0,1], snapped to the 256-level grid
that the bitstream can carry, so encoder and decoder provably condition on
the same values. Each activation layer turns the (downsampled) map into an
element-wise gain/bias pair and applies `e = s * gain + bias`, whose exact
inverse `s = (e - bias) / gain` only needs the gain kept away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, Parameter
from .tensor import Tensor

GRID_LEVELS = 255  # values live on {0, 1/255, ..., 255/255}
LOG_GAIN_BOUND = 6.9  # gain = exp(clamped raw) in [~1e-3, ~1e3]
GAIN_FLOOR = 1e-3


def canonicalize(values: np.ndarray) -> np.ndarray:
    """Snap quality values onto the 256-level grid (idempotent)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("quality level values must lie in [0, 1]")
    return np.round(arr * GRID_LEVELS) / GRID_LEVELS


@dataclass(frozen=True)
class QualityLevel:
    """Canonical H x W quality map; `uniform` marks spatially constant maps."""

    map: np.ndarray
    uniform: bool

    @staticmethod
    def from_scalar(value: float, height: int, width: int) -> "QualityLevel":
        v = canonicalize(np.float64(value))
        return QualityLevel(np.full((height, width), v), True)

    @staticmethod
    def from_map(values: np.ndarray) -> "QualityLevel":
        arr = canonicalize(values)
        if arr.ndim != 2:
            raise ValueError(f"quality map must be 2-d, got shape {arr.shape}")
        return QualityLevel(arr, bool(arr.min() == arr.max()))

    @staticmethod
    def from_levels(levels: np.ndarray) -> "QualityLevel":
        levels = np.asarray(levels)
        if levels.dtype != np.uint8:
            raise ValueError("levels must be uint8")
        return QualityLevel.from_map(levels.astype(np.float64) / GRID_LEVELS)

    @property
    def shape(self):
        return self.map.shape

    @property
    def scalar(self) -> float:
        if not self.uniform:
            raise ValueError("quality level is not uniform")
        return float(self.map.flat[0])

    def levels(self) -> np.ndarray:
        return np.round(self.map * GRID_LEVELS).astype(np.uint8)

    def padded(self, height: int, width: int) -> "QualityLevel":
        """Reflect-pad to the transform grid, mirroring the image padding."""
        h, w = self.map.shape
        arr = np.pad(self.map, ((0, height - h), (0, width - w)), mode="reflect") \
            if (height, width) != (h, w) else self.map
        return QualityLevel(arr, self.uniform)


@dataclass
class ActivationParams:
    """Element-wise gain (strictly positive) and bias, shaped like the feature."""

    gain: Tensor
    bias: Tensor

    def validate(self):
        if self.gain.shape != self.bias.shape:
            raise ValueError("gain/bias shape mismatch")
        if self.gain.data.min() < GAIN_FLOOR:
            raise ValueError("gain below positivity floor; corrupted activation params")
        return self


class ConditioningNet(Module):
    """Quality map -> (gain, bias) for one activation layer.

    Reflect padding keeps a spatially uniform map exactly uniform through
    the convs. The final conv is zero-initialized, so an untrained layer is
    the identity (gain 1, bias 0).
    """

    def __init__(self, channels: int, hidden: int = 16, rng=None, dtype=np.float32):
        self.channels = channels
        self.conv1 = Conv2d(1, hidden, k=3, pad_mode="reflect", rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, 2 * channels, k=3, pad_mode="reflect", zero_init=True, rng=rng, dtype=dtype)

    def __call__(self, pooled_qmap: Tensor) -> ActivationParams:
        raw = self.conv2(T.leaky_relu(self.conv1(pooled_qmap)))
        raw_gain = T.narrow(raw, 1, 0, self.channels)
        bias = T.narrow(raw, 1, self.channels, self.channels)
        gain = T.texp(T.clamp(raw_gain, -LOG_GAIN_BOUND, LOG_GAIN_BOUND))
        return ActivationParams(gain, bias)


class ScalarGainNet(Module):
    """Ablation variant: per-channel gain/bias from the mean quality only.

    Collapses the spatial transform to a channel weighting, the baseline
    the tensor form is compared against in the ablation harness.
    """

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        self.channels = channels
        self.gain_slope = Parameter(np.zeros(channels), dtype=dtype)
        self.gain_bias = Parameter(np.zeros(channels), dtype=dtype)
        self.bias_slope = Parameter(np.zeros(channels), dtype=dtype)
        self.bias_bias = Parameter(np.zeros(channels), dtype=dtype)

    def __call__(self, pooled_qmap: Tensor) -> ActivationParams:
        n, _, h, w = pooled_qmap.shape
        mean_q = T.reshape(T.tsum(pooled_qmap, axis=(2, 3)), (n, 1, 1, 1)) * (1.0 / (h * w))
        shape = (1, self.channels, 1, 1)
        raw = T.reshape(self.gain_slope, shape) * mean_q + T.reshape(self.gain_bias, shape)
        gain = T.texp(T.clamp(raw, -LOG_GAIN_BOUND, LOG_GAIN_BOUND))
        bias = T.reshape(self.bias_slope, shape) * mean_q + T.reshape(self.bias_bias, shape)
        ones = Tensor(np.ones((n, self.channels, h, w), dtype=pooled_qmap.data.dtype))
        return ActivationParams(gain * ones, bias * ones)


def pool_qmap(qmap: Tensor, scale_index: int) -> Tensor:
    """Average-pool a full-resolution N x 1 x H x W map down by 2**scale_index."""
    return T.avg_pool2d(qmap, 2 ** scale_index)


def condition(qmap: Tensor, scale_index: int, feature_shape, net) -> ActivationParams:
    """Produce activation params for a feature at the given transform scale."""
    pooled = pool_qmap(qmap, scale_index)
    c, h, w = feature_shape[-3:]
    if pooled.shape[2] != h or pooled.shape[3] != w:
        raise ValueError(
            f"conditioning map {pooled.shape[2]}x{pooled.shape[3]} does not match feature {h}x{w}"
        )
    params = net(pooled)
    if params.gain.shape[1] != c:
        raise ValueError(f"conditioning produced {params.gain.shape[1]} channels, feature has {c}")
    return params


def iat_forward(s: Tensor, params: ActivationParams) -> Tensor:
    if s.shape != params.gain.shape:
        raise ValueError(f"feature shape {s.shape} does not match params {params.gain.shape}")
    return s * params.gain + params.bias


def iat_inverse(e: Tensor, params: ActivationParams) -> Tensor:
    if e.shape != params.gain.shape:
        raise ValueError(f"feature shape {e.shape} does not match params {params.gain.shape}")
    if params.gain.data.min() < GAIN_FLOOR:
        raise ValueError("gain below positivity floor; corrupted activation params")
    return (e - params.bias) / params.gain
