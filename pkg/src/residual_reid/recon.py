"""Coarse image reconstruction: a VAE with spatial latents, its AE twin, and a
bilateral-filter baseline.

The encoder halves resolution four times with max-pooling (stride-1 convs in
between), so a ``(3, H, W)`` image maps to ``(latent_channels, H/16, W/16)``
mean and log-variance maps. The decoder mirrors it with nearest-neighbour
upsampling followed by a convolution at each stage; transposed convolutions
are avoided on purpose because they produce checkerboard artifacts.

Loss conventions
----------------
``mse_loss`` averages the squared error over pixels, channels and batch.
``kl_loss`` sums ``mu^2 + sigma^2 - log sigma^2 - 1`` over every latent
element of an image and divides by ``2 * (H/16) * (W/16)``, i.e. by the
latent *spatial* size only. The value therefore grows linearly with
``latent_channels``; keep that in mind when comparing ``kl_weight`` across
configurations with different channel counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

DOWNSAMPLE_FACTOR = 16


@dataclass
class VaeConfig:
    latent_channels: int = 16
    encoder_widths: Sequence[int] = (32, 64, 128, 256)
    kl_weight: float = 1e-3
    seed: int = 0
    norm_groups: int = 8

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.latent_channels < 1:
            raise ConfigurationError(f"latent_channels must be >= 1, got {self.latent_channels}")
        if self.kl_weight < 0:
            raise ConfigurationError(f"kl_weight must be >= 0, got {self.kl_weight}")
        if len(self.encoder_widths) != 4:
            raise ConfigurationError(
                f"encoder_widths needs one width per pooling stage (4), got {self.encoder_widths}")


@dataclass
class LatentDistribution:
    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ShapeError(
                f"mean {tuple(self.mean.shape)} and log-variance "
                f"{tuple(self.log_variance.shape)} shapes differ")

    @property
    def variance(self) -> torch.Tensor:
        return self.log_variance.exp()


@dataclass
class ReconstructionOutput:
    generated: torch.Tensor
    latent: LatentDistribution
    sampled_latent: torch.Tensor


def check_divisible(height: int, width: int) -> None:
    if height % DOWNSAMPLE_FACTOR or width % DOWNSAMPLE_FACTOR or height <= 0 or width <= 0:
        raise ShapeError(
            f"input size {height}x{width} must be positive and divisible by "
            f"{DOWNSAMPLE_FACTOR} in both dimensions")


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class _ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, groups):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            _norm(c_out, groups),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    def __init__(self, config: VaeConfig, in_channels: int = 3):
        super().__init__()
        stages = []
        c_in = in_channels
        for width in config.encoder_widths:
            stages.append(nn.Sequential(_ConvBlock(c_in, width, config.norm_groups),
                                        nn.MaxPool2d(2)))
            c_in = width
        self.stages = nn.Sequential(*stages)
        self.to_mean = nn.Conv2d(c_in, config.latent_channels, 1)
        self.to_log_variance = nn.Conv2d(c_in, config.latent_channels, 1)

    def forward(self, x):
        h = self.stages(x)
        return self.to_mean(h), self.to_log_variance(h)


class _UpBlock(nn.Module):
    def __init__(self, c_in, c_out, groups):
        super().__init__()
        self.conv = _ConvBlock(c_in, c_out, groups)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Decoder(nn.Module):
    def __init__(self, config: VaeConfig, out_channels: int = 3):
        super().__init__()
        widths = list(config.encoder_widths)[::-1]
        self.latent_channels = config.latent_channels
        self.stem = _ConvBlock(config.latent_channels, widths[0], config.norm_groups)
        ups = []
        for c_in, c_out in zip(widths, widths[1:] + widths[-1:]):
            ups.append(_UpBlock(c_in, c_out, config.norm_groups))
        self.ups = nn.Sequential(*ups)
        self.head = nn.Conv2d(widths[-1], out_channels, 3, padding=1)

    def forward(self, z):
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(
                f"latent must be (N, {self.latent_channels}, h, w), got {tuple(z.shape)}")
        return torch.tanh(self.head(self.ups(self.stem(z))))


class VAE(nn.Module):
    """Convolutional VAE over 3-D (channel, height, width) latent maps.

    ``forward`` samples the latent with the reparameterization trick unless
    ``sample=False``, in which case the mean is decoded directly. The AE
    variant used in ablations is the same network run with ``sample=False``
    and trained without the KL term.
    """

    def __init__(self, config: Optional[VaeConfig] = None):
        super().__init__()
        self.config = config or VaeConfig()
        self.encoder = Encoder(self.config)
        self.decoder = Decoder(self.config)

    def encode(self, images: torch.Tensor) -> LatentDistribution:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        check_divisible(images.shape[-2], images.shape[-1])
        mean, log_variance = self.encoder(images)
        return LatentDistribution(mean, log_variance)

    def decode(self, sampled_latent: torch.Tensor) -> torch.Tensor:
        return self.decoder(sampled_latent)

    def forward(self, images, sample=True, generator=None, noise=None) -> ReconstructionOutput:
        latent = self.encode(images)
        if sample:
            theta = reparameterize(latent, generator=generator, noise=noise)
        else:
            theta = latent.mean
        return ReconstructionOutput(self.decode(theta), latent, theta)


def reparameterize(latent: LatentDistribution, generator: Optional[torch.Generator] = None,
                   noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """theta = mu + sigma * eps, eps ~ N(0, I). Pass ``noise`` to fix eps."""
    if noise is None:
        noise = torch.randn(latent.mean.shape, generator=generator,
                            dtype=latent.mean.dtype, device=latent.mean.device)
    elif noise.shape != latent.mean.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(latent.mean.shape)}")
    return latent.mean + torch.exp(0.5 * latent.log_variance) * noise


def ae_reconstruct(images: torch.Tensor, model: VAE) -> torch.Tensor:
    """Deterministic encode/decode through the latent mean (AE forward pass)."""
    return model(images, sample=False).generated


def mse_loss(original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    if original.shape != generated.shape:
        raise ShapeError(f"shape mismatch: {tuple(original.shape)} vs {tuple(generated.shape)}")
    return ((original - generated) ** 2).mean()


def kl_loss(latent: LatentDistribution) -> torch.Tensor:
    mu, log_var = latent.mean, latent.log_variance
    if mu.dim() == 3:
        mu, log_var = mu.unsqueeze(0), log_var.unsqueeze(0)
    spatial = mu.shape[-2] * mu.shape[-1]
    per_element = mu ** 2 + log_var.exp() - log_var - 1.0
    per_image = per_element.flatten(1).sum(dim=1) / (2.0 * spatial)
    return per_image.mean()


def reconstruction_loss(original: torch.Tensor, output: ReconstructionOutput,
                        kl_weight: float = 1e-3) -> torch.Tensor:
    if kl_weight < 0:
        raise ConfigurationError(f"kl_weight must be >= 0, got {kl_weight}")
    return mse_loss(original, output.generated) + kl_weight * kl_loss(output.latent)


def bilateral_filter_reconstruct(image, spatial_sigma: float, range_sigma: float,
                                 radius: Optional[int] = None) -> np.ndarray:
    """Edge-preserving smoothing of a ``(C, H, W)`` image.

    Range weights use the Euclidean colour distance across channels, so all
    channels share one weight map. Borders are mirrored (half-sample
    symmetric). The window radius defaults to ``ceil(3 * spatial_sigma)``.
    """
    if spatial_sigma <= 0 or range_sigma <= 0:
        raise ConfigurationError(
            f"sigmas must be positive, got spatial={spatial_sigma}, range={range_sigma}")
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().double().numpy()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got shape {img.shape}")
    r = int(math.ceil(3 * spatial_sigma)) if radius is None else int(radius)
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="symmetric")
    num = np.zeros_like(img)
    den = np.zeros((h, w))
    inv_2s = 1.0 / (2 * spatial_sigma ** 2)
    inv_2r = 1.0 / (2 * range_sigma ** 2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[:, r + dy:r + dy + h, r + dx:r + dx + w]
            colour = ((shifted - img) ** 2).sum(axis=0)
            weight = math.exp(-(dy * dy + dx * dx) * inv_2s) * np.exp(-colour * inv_2r)
            num += weight * shifted
            den += weight
    return num / den
