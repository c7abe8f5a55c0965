"""The full variable-rate codec model: dense enhancement, the multi-scale
invertible stack with activation conditioning, channel squeeze, and the
hyperprior entropy path."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .entropy import ChannelPrior, HyperAnalysis, HyperSynthesis, gaussian_bits, quantize
from .iat import ConditioningNet, QualityLevel, ScalarGainNet, iat_forward, iat_inverse, pool_qmap
from .inn import ChannelSqueeze, CouplingBlock, DenseBlock, squeeze2, unsqueeze2
from .nn import Module
from .rate import RateControlConfig, lambda_map, rd_loss
from .tensor import Tensor


@dataclass(frozen=True)
class ArchitectureConfig:
    """Concrete network topology; the desk-scale defaults train in minutes."""

    scales: int = 2
    blocks_per_scale: int = 2
    latent_channels: int = 24
    dense_layers: int = 3
    dense_growth: int = 16
    hyper_channels: int = 8
    coupling_hidden: int = 0  # 0: match the channel count at that scale
    iat_hidden: int = 16
    image_channels: int = 3
    qlevel_mode: str = "tensor"  # "scalar" switches to the per-channel-gain ablation

    def __post_init__(self):
        if self.scales < 1 or self.blocks_per_scale < 1:
            raise ValueError("need at least one scale and one block per scale")
        if self.qlevel_mode not in ("tensor", "scalar"):
            raise ValueError(f"unknown qlevel_mode '{self.qlevel_mode}'")
        full = self.full_channels
        if full % self.latent_channels:
            raise ValueError(
                f"latent_channels {self.latent_channels} must divide {full} channels")
        for k in range(self.scales):
            if self.stage_channels(k) % 2:
                raise ValueError(f"odd channel count at scale {k}")

    @property
    def full_channels(self) -> int:
        return self.image_channels * 4 ** self.scales

    @property
    def group_size(self) -> int:
        return self.full_channels // self.latent_channels

    @property
    def downsample(self) -> int:
        return 2 ** self.scales

    def stage_channels(self, k: int) -> int:
        return self.image_channels * 4 ** (k + 1)

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_mapping(mapping) -> "ArchitectureConfig":
        kwargs = {}
        for f in fields(ArchitectureConfig):
            if f.name in mapping:
                raw = mapping[f.name]
                kwargs[f.name] = str(raw) if f.name == "qlevel_mode" else int(raw)
        return ArchitectureConfig(**kwargs)


class _ScaleStage(Module):
    def __init__(self, cfg: ArchitectureConfig, k: int, rng, dtype):
        channels = cfg.stage_channels(k)
        hidden = cfg.coupling_hidden or channels
        self.couplings = [
            CouplingBlock(channels, hidden, swap=(i % 2 == 1), rng=rng, dtype=dtype)
            for i in range(cfg.blocks_per_scale)
        ]
        if cfg.qlevel_mode == "scalar":
            self.conditioners = [ScalarGainNet(channels, rng=rng, dtype=dtype)
                                 for _ in range(cfg.blocks_per_scale)]
        else:
            self.conditioners = [ConditioningNet(channels, cfg.iat_hidden, rng=rng, dtype=dtype)
                                 for _ in range(cfg.blocks_per_scale)]


class CodecModel(Module):
    def __init__(self, config: ArchitectureConfig = ArchitectureConfig(),
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = np.dtype(dtype)
        self.dense = DenseBlock(config.image_channels, config.dense_layers,
                                config.dense_growth, rng, dtype)
        self.stages = [_ScaleStage(config, k, rng, dtype) for k in range(config.scales)]
        self.channel_squeeze = ChannelSqueeze(config.full_channels, config.latent_channels, dtype)
        self.hyper_a = HyperAnalysis(config.latent_channels, config.hyper_channels, rng, dtype)
        self.hyper_s = HyperSynthesis(config.latent_channels, config.hyper_channels, rng, dtype)
        self.z_prior = ChannelPrior(config.hyper_channels, dtype)

    # -- quality map plumbing -------------------------------------------------

    def qmap_tensor(self, qlevel) -> Tensor:
        """Normalize a QualityLevel / (H,W) / (N,H,W) array to N x 1 x H x W."""
        arr = qlevel.map if isinstance(qlevel, QualityLevel) else np.asarray(qlevel)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"quality map must be (H,W) or (N,H,W), got {arr.shape}")
        return Tensor(arr[:, None].astype(self.dtype))

    def _check_dims(self, x: Tensor, qmap: Tensor):
        n, c, h, w = x.shape
        if c != self.config.image_channels:
            raise ValueError(f"expected {self.config.image_channels} image channels, got {c}")
        d = self.config.downsample
        if h % d or w % d:
            raise ValueError(f"spatial dims {h}x{w} not divisible by {d}")
        if qmap.shape != (n, 1, h, w):
            raise ValueError(f"quality map shape {qmap.shape} does not match image {x.shape}")

    # -- transforms ------------------------------------------------------------

    def analysis(self, x, qlevel) -> Tensor:
        x = T.as_tensor(x)
        qmap = qlevel if isinstance(qlevel, Tensor) else self.qmap_tensor(qlevel)
        self._check_dims(x, qmap)
        t = self.dense(x)
        for k, stage in enumerate(self.stages):
            t = squeeze2(t)
            pooled = pool_qmap(qmap, k + 1)
            for coupling, cond in zip(stage.couplings, stage.conditioners):
                t = coupling.forward(t)
                t = iat_forward(t, cond(pooled))
        return self.channel_squeeze.squeeze(t)

    def synthesis(self, y_hat, qlevel, clamp: bool = True) -> Tensor:
        y_hat = T.as_tensor(y_hat)
        qmap = qlevel if isinstance(qlevel, Tensor) else self.qmap_tensor(qlevel)
        t = self.channel_squeeze.unsqueeze(y_hat)
        for k in reversed(range(self.config.scales)):
            stage = self.stages[k]
            pooled = pool_qmap(qmap, k + 1)
            for coupling, cond in zip(reversed(stage.couplings), reversed(stage.conditioners)):
                t = iat_inverse(t, cond(pooled))
                t = coupling.inverse(t)
            t = unsqueeze2(t)
        if t.shape[2:] != qmap.shape[2:]:
            raise ValueError(f"latent inconsistent with quality map: image {t.shape} vs {qmap.shape}")
        return T.clamp(t, 0.0, 1.0) if clamp else t

    # -- training forward -------------------------------------------------------

    def train_losses(self, images: np.ndarray, qlevels: np.ndarray, rng,
                     rate_cfg: RateControlConfig = RateControlConfig(),
                     frozen_noise=None) -> dict:
        """One differentiable pass of the rate-distortion objective.

        `frozen_noise`, a pair of arrays shaped like (y, z), replaces the
        quantizer draw so finite-difference checks see a deterministic loss.
        """
        x = Tensor(np.asarray(images, dtype=self.dtype))
        qmap = self.qmap_tensor(qlevels)
        y = self.analysis(x, qmap)
        z = self.hyper_a(y)
        if frozen_noise is not None:
            noise_y, noise_z = frozen_noise
            y_hat = y + Tensor(np.asarray(noise_y, dtype=self.dtype))
            z_hat = z + Tensor(np.asarray(noise_z, dtype=self.dtype))
        else:
            y_hat = quantize(y, "noise", rng)
            z_hat = quantize(z, "noise", rng)
        mean, sigma = self.hyper_s(z_hat, y.shape[2:])
        bits_y = gaussian_bits(y_hat, mean, sigma)
        bits_z = self.z_prior.bits(z_hat)
        x_hat = self.synthesis(y_hat, qmap, clamp=False)
        lam = lambda_map(np.asarray(qlevels), rate_cfg, channels=self.config.image_channels)
        if lam.ndim == 3:
            lam = lam[None]
        loss = rd_loss(x, x_hat, bits_y, bits_z, lam)
        n, _, h, w = x.shape
        total_bits = float(bits_y.data.sum() + bits_z.data.sum())
        mse = float(((x.data - x_hat.data) ** 2).mean())
        return {
            "loss": loss,
            "bpp_estimate": total_bits / (n * h * w),
            "mse": mse,
            "y": y,
        }

    # -- identity ----------------------------------------------------------------

    def model_hash(self) -> int:
        """64-bit digest over architecture and every parameter byte."""
        h = hashlib.sha256()
        h.update(self.config.to_text().encode())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(str(p.data.dtype).encode())
            h.update(np.asarray(p.data.shape, dtype=np.int64).tobytes())
            h.update(p.data.tobytes())
        return int.from_bytes(h.digest()[:8], "big")

    def cast(self, dtype) -> "CodecModel":
        """Same weights in another precision (for float64 checks)."""
        clone = CodecModel(self.config, seed=0, dtype=dtype)
        src = dict(self.named_parameters())
        for name, p in clone.named_parameters():
            p.data = src[name].data.astype(dtype)
        return clone


def randomize_parameters(model: CodecModel, rng, std: float = 0.1, skip=()) -> None:
    """Overwrite every parameter with N(0, std) noise, except names whose
    prefix is in `skip`. Used by invertibility checks, which need the
    zero-initialized final layers to be live."""
    for name, p in model.named_parameters():
        if any(name.startswith(s) for s in skip):
            continue
        p.data = rng.normal(0.0, std, size=p.data.shape).astype(p.data.dtype)
