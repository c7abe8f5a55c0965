"""Rate control: the quality-to-lambda map, training-time quality sampling,
and the tensor rate-distortion loss.

The Lagrangian is a per-element tensor, theta * exp(tau * L) replicated
across channels, so each pixel buys reconstruction quality at its own
price; a spatially uniform map collapses the loss to the ordinary
scalar rate + lambda * MSE objective. Distortion is measured in squared
8-bit pixel units and the rate term is normalized per pixel, the scaling
under which the default theta/tau constants give sensible operating
points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import tensor as T
from .iat import QualityLevel, canonicalize
from .tensor import Tensor

PIXEL_SCALE = 255.0


@dataclass(frozen=True)
class RateControlConfig:
    theta: float = 0.0012
    tau: float = 4.382

    def __post_init__(self):
        if self.theta <= 0 or self.tau <= 0:
            raise ValueError("theta and tau must be positive")


def lambda_value(level, cfg: RateControlConfig = RateControlConfig()):
    """V(L) = theta * exp(tau * L); strictly increasing in the level."""
    return cfg.theta * np.exp(cfg.tau * np.asarray(level, dtype=np.float64))


def lambda_map(qlevel, cfg: RateControlConfig = RateControlConfig(), channels: int = 3) -> np.ndarray:
    """Per-element Lagrangian tensor, identical across channels.

    Accepts a QualityLevel or a (H, W) / (N, H, W) canonical array and
    returns an array with a leading channel axis inserted.
    """
    arr = qlevel.map if isinstance(qlevel, QualityLevel) else np.asarray(qlevel, dtype=np.float64)
    lam = lambda_value(arr, cfg)
    if lam.ndim == 2:
        return np.broadcast_to(lam[None], (channels,) + lam.shape).copy()
    if lam.ndim == 3:
        return np.broadcast_to(lam[:, None], (lam.shape[0], channels) + lam.shape[1:]).copy()
    raise ValueError(f"quality map must be 2-d or 3-d, got shape {lam.shape}")


def rd_loss(x, x_hat, bits_y, bits_z, lam) -> Tensor:
    """Tensor rate-distortion loss.

    rate: (sum of latent bits + sum of side bits) per pixel.
    distortion: mean over elements of lambda_i * (pixel-unit error)^2,
    with images in [0, 1] scaled by 255 to pixel units.
    """
    x = T.as_tensor(x)
    x_hat = T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    lam_arr = np.asarray(lam.data if isinstance(lam, Tensor) else lam)
    if lam_arr.shape != x.shape:
        raise ValueError(f"lambda tensor shape {lam_arr.shape} does not match image {x.shape}")
    for name, t in (("bits_y", bits_y), ("bits_z", bits_z), ("x", x), ("x_hat", x_hat)):
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if not np.all(np.isfinite(data)):
            raise ValueError(f"rd_loss: non-finite values in {name}")
    n_pixels = x.shape[-1] * x.shape[-2]
    if x.data.ndim == 4:
        n_pixels *= x.shape[0]
    rate = (T.tsum(bits_y) + T.tsum(bits_z)) * (1.0 / n_pixels)
    err = (x - x_hat) * PIXEL_SCALE
    weights = Tensor(lam_arr.astype(x.data.dtype))
    distortion = T.tmean(weights * err * err)
    return rate + distortion


def scalar_rd_loss(bits_total: float, mse_pixel_units: float, lam: float, n_pixels: int) -> float:
    """Classic scalar R + lambda * D under the same scaling conventions."""
    return bits_total / n_pixels + lam * mse_pixel_units


def sample_training_qlevel(rng, height: int, width: int, uniform_prob: float = 0.5,
                           smooth: int = 8) -> QualityLevel:
    """Draw a training quality map.

    With probability `uniform_prob` a single scalar from U(0,1); otherwise
    per-pixel U(0,1) noise box-filtered (width `smooth`) so neighboring
    pixels do not demand wildly different rates.
    """
    if rng.random() < uniform_prob:
        return QualityLevel.from_scalar(rng.random(), height, width)
    noise = rng.random((height, width))
    if smooth > 1:
        noise = uniform_filter(noise, size=smooth, mode="reflect")
    return QualityLevel.from_map(np.clip(noise, 0.0, 1.0))
