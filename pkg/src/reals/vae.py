"""Convolutional VAE with a Gaussian posterior over a spatial latent grid.

Latents are exposed channels-last, ``(B, g_h, g_w, D)``, with
``g_h = H / p`` and ``g_w = W / p``. Convolutions run channels-first
internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


class ShapeError(ValueError):
    """Raised when an array does not have the shape an operation requires."""


class NonFiniteError(ValueError):
    """Raised when an input contains NaN or infinite values."""


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian ``q(z | x)``; both fields are ``(B, g_h, g_w, D)``."""

    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeError(f"mu {tuple(self.mu.shape)} and logvar {tuple(self.logvar.shape)} differ")

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    @property
    def shape(self) -> torch.Size:
        return self.mu.shape


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, latent_dim: int, widths: tuple[int, ...], n_down: int):
        super().__init__()
        self.conv_in = nn.Conv2d(3, widths[0], 3, padding=1)
        blocks = []
        c = widths[0]
        for level in range(n_down):
            c_out = widths[min(level + 1, len(widths) - 1)]
            blocks.append(ResBlock(c, c_out))
            blocks.append(nn.Conv2d(c_out, c_out, 3, stride=2, padding=1))
            c = c_out
        blocks.append(ResBlock(c, c))
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, 2 * latent_dim, 3, padding=1)

    def forward(self, x):
        h = self.blocks(self.conv_in(x))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, latent_dim: int, widths: tuple[int, ...], n_up: int):
        super().__init__()
        c = widths[-1]
        self.conv_in = nn.Conv2d(latent_dim, c, 3, padding=1)
        blocks = [ResBlock(c, c)]
        for level in reversed(range(n_up)):
            c_out = widths[level]
            blocks.append(nn.Upsample(scale_factor=2, mode="nearest"))
            blocks.append(nn.Conv2d(c, c_out, 3, padding=1))
            blocks.append(ResBlock(c_out, c_out))
            c = c_out
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, z):
        h = self.blocks(self.conv_in(z))
        return self.conv_out(F.silu(self.norm_out(h)))


class VaeModel(nn.Module):
    """Encoder/decoder pair with downsampling factor ``p`` and ``D`` latent channels.

    Args:
        p: Spatial downsampling factor, 4 or 8.
        latent_dim: Number of latent channels ``D``.
        widths: Channel widths from the highest resolution down; the
            ``log2(p)`` downsampling stages index into it.
    """

    def __init__(self, p: int = 8, latent_dim: int = 4, widths: tuple[int, ...] = (16, 32, 32)):
        super().__init__()
        if p not in (4, 8):
            raise ValueError(f"downsampling factor must be 4 or 8, got {p}")
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.p = p
        self.latent_dim = latent_dim
        self.widths = tuple(int(w) for w in widths)
        n = int(math.log2(p))
        self.encoder = Encoder(latent_dim, self.widths, n)
        self.decoder = Decoder(latent_dim, self.widths, n)

    def zero_init_final_layers(self, encoder: bool = True, decoder: bool = True) -> None:
        for flag, conv in ((encoder, self.encoder.conv_out), (decoder, self.decoder.conv_out)):
            if flag:
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)

    def forward(self, images: torch.Tensor, noise: torch.Tensor | None = None):
        post = encode(self, images)
        if noise is None:
            noise = torch.randn_like(post.mu)
        z = reparameterize(post, noise)
        return post, z, decode(self, z, clamp=False)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains non-finite values")


def encode(model: VaeModel, images: torch.Tensor) -> GaussianPosterior:
    """Map ``(B, 3, H, W)`` images to a posterior over ``(B, H/p, W/p, D)``."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % model.p or w % model.p or h == 0 or w == 0:
        raise ShapeError(f"image size {h}x{w} is not a positive multiple of p={model.p}")
    _check_finite(images, "images")
    moments = model.encoder(images).permute(0, 2, 3, 1)
    mu, logvar = moments.chunk(2, dim=-1)
    return GaussianPosterior(mu.contiguous(), logvar.clamp(LOGVAR_MIN, LOGVAR_MAX).contiguous())


def reparameterize(post: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    """``z = mu + exp(logvar / 2) * noise``."""
    if noise.shape != post.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != posterior shape {tuple(post.mu.shape)}")
    return post.mu + torch.exp(0.5 * post.logvar) * noise


def decode(model: VaeModel, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """Decode a channels-last latent grid to ``(B, 3, g_h * p, g_w * p)``.

    ``clamp=False`` is the training path: the raw mean prediction feeds the
    losses. Inference output is clamped to ``[-1, 1]``.
    """
    if z.ndim != 4 or z.shape[-1] != model.latent_dim:
        raise ShapeError(f"expected (B, g_h, g_w, {model.latent_dim}) latents, got {tuple(z.shape)}")
    x = model.decoder(z.permute(0, 3, 1, 2))
    return x.clamp(-1.0, 1.0) if clamp else x


def kl_to_standard_normal(post: GaussianPosterior) -> torch.Tensor:
    """KL(q || N(0, I)), summed over latent elements and averaged over the batch."""
    _check_finite(post.mu, "mu")
    _check_finite(post.logvar, "logvar")
    per_elem = post.mu.pow(2) + torch.exp(post.logvar) - 1.0 - post.logvar
    return 0.5 * per_elem.flatten(1).sum(dim=1).mean()
