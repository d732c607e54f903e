"""Deterministic invertible pixel<->latent codec.

A learned autoencoder would blur the attribution of editing quality between
codec and denoiser, so the latent space here is a space-to-depth rearrangement
followed by a per-channel affine: images (3,H,W) map to latents (3f^2,H/f,W/f)
losslessly.

Bitwise round-trips and floating point:  an affine with arbitrary float64
constants cannot round-trip arbitrary doubles bitwise (subtracting a mean can
drop low mantissa bits).  Constants are therefore snapped - means to multiples
of 1/256 and stds to powers of two - and pipeline images live on the u/256
pixel grid (they come from 8-bit files).  On that grid both directions are
exact: x - mean is representable, division by a power of two is lossless, and
the reverse affine reproduces the input bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class CodecConfig:
    """Spatial factor plus per-latent-channel normalization constants."""

    spatial_factor: int = 2
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(12))
    channel_std: np.ndarray = field(default_factory=lambda: np.ones(12))

    def __post_init__(self):
        self.channel_mean = np.asarray(self.channel_mean, dtype=np.float64)
        self.channel_std = np.asarray(self.channel_std, dtype=np.float64)
        f = self.spatial_factor
        if f < 1 or int(f) != f:
            raise ConfigurationError(f"spatial_factor must be a positive integer, got {f}")
        d_z = 3 * f * f
        if self.channel_mean.shape != (d_z,) or self.channel_std.shape != (d_z,):
            raise ConfigurationError(
                f"normalization constants must have shape ({d_z},) for factor {f}, "
                f"got {self.channel_mean.shape} and {self.channel_std.shape}")
        if not np.all(self.channel_std > 0):
            raise ConfigurationError("channel_std must be strictly positive")

    @property
    def latent_channels(self) -> int:
        return 3 * self.spatial_factor ** 2


def _space_to_depth(x: np.ndarray, f: int) -> np.ndarray:
    c, h, w = x.shape
    return np.ascontiguousarray(
        x.reshape(c, h // f, f, w // f, f).transpose(0, 2, 4, 1, 3)
    ).reshape(c * f * f, h // f, w // f)


def _depth_to_space(z: np.ndarray, f: int) -> np.ndarray:
    d, h, w = z.shape
    c = d // (f * f)
    return np.ascontiguousarray(
        z.reshape(c, f, f, h, w).transpose(0, 3, 1, 4, 2)
    ).reshape(c, h * f, w * f)


def encode(image, config: CodecConfig):
    """(3,H,W) pixels in [0,1] -> normalized latent (3f^2, H/f, W/f)."""
    wrap = isinstance(image, Tensor)
    x = image.data if wrap else np.asarray(image, dtype=np.float64)
    f = config.spatial_factor
    if x.ndim != 3 or x.shape[0] != 3:
        raise ConfigurationError(f"encode expects (3,H,W), got {x.shape}")
    if x.shape[1] % f or x.shape[2] % f:
        raise ConfigurationError(
            f"spatial extents {x.shape[1]}x{x.shape[2]} not divisible by factor {f}")
    z = _space_to_depth(x, f)
    z = (z - config.channel_mean[:, None, None]) / config.channel_std[:, None, None]
    return Tensor(z) if wrap else z


def decode(latent, config: CodecConfig):
    """Exact inverse of :func:`encode`."""
    wrap = isinstance(latent, Tensor)
    z = latent.data if wrap else np.asarray(latent, dtype=np.float64)
    f = config.spatial_factor
    if z.ndim != 3 or z.shape[0] != config.latent_channels:
        raise ConfigurationError(
            f"decode expects ({config.latent_channels},h,w) for factor {f}, got {z.shape}")
    x = z * config.channel_std[:, None, None] + config.channel_mean[:, None, None]
    x = _depth_to_space(x, f)
    return Tensor(x) if wrap else x


def snap_mean(mean: np.ndarray) -> np.ndarray:
    """Nearest multiples of 1/256 (exactly subtractable from 8-bit pixels)."""
    return np.rint(np.asarray(mean, dtype=np.float64) * 256.0) / 256.0


def snap_std(std: np.ndarray) -> np.ndarray:
    """Nearest powers of two (division is exact), never below 2^-6."""
    std = np.asarray(std, dtype=np.float64)
    expo = np.rint(np.log2(np.maximum(std, 2.0 ** -6)))
    return 2.0 ** expo


def derive_codec_constants(images: np.ndarray, spatial_factor: int) -> CodecConfig:
    """Fit snapped per-channel constants to a stack of (N,3,H,W) images."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ConfigurationError(f"expected (N,3,H,W) image stack, got {images.shape}")
    f = spatial_factor
    stacked = np.stack([_space_to_depth(img, f) for img in images])
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return CodecConfig(spatial_factor=f,
                       channel_mean=snap_mean(mean),
                       channel_std=snap_std(std))
