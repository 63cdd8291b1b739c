"""Toy latent flow matching: denoiser, training loss, Euler/SDE sampler with guidance.

Time runs from ``t = 0`` (data) to ``t = 1`` (noise) along the linear
interpolant ``x_t = (1 - t) z0 + t eps``; the network predicts the velocity
``eps - z0``. Sampling integrates from ``t = 1`` back to ``t = 0``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import derive_seed
from .latent_ops import NormMethod, NormStats, normalize_decode
from .vae import ShapeError, VaeModel, decode

SD_LATENT_SCALE = 0.18215
SHARD_SIZE = 64


class UnnormalizedLatentError(ValueError):
    """Training batch statistics are far outside the expected normalized range."""


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _ResMLPBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.mod = nn.Linear(width, 2 * width)
        self.fc1 = nn.Linear(width, 2 * width)
        self.fc2 = nn.Linear(2 * width, width)

    def forward(self, h, emb):
        scale, shift = self.mod(emb).chunk(2, dim=-1)
        x = self.norm(h) * (1 + scale) + shift
        return h + self.fc2(F.silu(self.fc1(x)))


class Denoiser(nn.Module):
    """Class-conditional residual MLP velocity model on a flattened latent grid.

    Label ``n_classes`` is the null token used for classifier-free guidance.
    """

    def __init__(self, latent_shape: tuple[int, int, int], n_classes: int, width: int = 256, depth: int = 3):
        super().__init__()
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.n_classes = int(n_classes)
        self.width = width
        self.depth = depth
        d = int(np.prod(self.latent_shape))
        self.inp = nn.Linear(d, width)
        self.t_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.label_emb = nn.Embedding(self.n_classes + 1, width)
        self.blocks = nn.ModuleList(_ResMLPBlock(width) for _ in range(depth))
        self.norm_out = nn.LayerNorm(width)
        self.out = nn.Linear(width, d)

    @property
    def null_label(self) -> int:
        return self.n_classes

    def forward(self, x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.latent_shape:
            raise ShapeError(f"denoiser expects {self.latent_shape} latents, got {tuple(x.shape[1:])}")
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device).expand(x.shape[0])
        emb = F.silu(self.t_mlp(timestep_embedding(t, self.width)) + self.label_emb(labels))
        h = self.inp(x.flatten(1))
        for block in self.blocks:
            h = block(h, emb)
        return self.out(self.norm_out(h)).view_as(x)


def expected_normalized_moments(ours: NormStats, ref: NormStats, method, latent_scale: float) -> tuple[float, float]:
    """Mean and std the diffusion model should see after normalization and scaling."""
    method = NormMethod.parse(method)
    ratio = ref.spread(method) / ours.spread(method)
    return ref.mean * latent_scale, ours.std * ratio * latent_scale


def check_normalized(z0: torch.Tensor, expected: tuple[float, float], factor: float = 5.0) -> None:
    """Refuse batches whose mean or std sits more than ``factor`` times outside expectation."""
    mean, std = expected
    b_mean, b_std = float(z0.mean()), float(z0.std())
    if abs(b_mean - mean) > factor * max(std, 1e-12) or not (std / factor <= b_std <= std * factor):
        raise UnnormalizedLatentError(
            f"batch mean/std ({b_mean:.4g}, {b_std:.4g}) inconsistent with normalized latents "
            f"({mean:.4g}, {std:.4g}); were the latents passed through normalize_encode?")


def fm_training_loss(model, z0: torch.Tensor, labels: torch.Tensor, generator: torch.Generator,
                     cfg_dropout: float = 0.1, null_label: int | None = None,
                     expected: tuple[float, float] | None = None) -> torch.Tensor:
    """Velocity flow-matching loss, mean over all elements.

    ``labels`` are replaced by ``null_label`` with probability ``cfg_dropout``.
    When ``expected`` (mean, std) is given, batches that look unnormalized
    are refused.
    """
    if expected is not None:
        check_normalized(z0, expected)
    B = z0.shape[0]
    t = torch.rand(B, generator=generator, dtype=z0.dtype)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    drop = torch.rand(B, generator=generator) < cfg_dropout
    if null_label is None:
        null_label = getattr(model, "null_label", None)
    if null_label is not None and cfg_dropout > 0:
        labels = torch.where(drop, torch.full_like(labels, null_label), labels)
    tb = t.view(B, *([1] * (z0.ndim - 1)))
    x_t = (1 - tb) * z0 + tb * eps
    return (model(x_t, t, labels) - (eps - z0)).pow(2).mean()


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 250
    last_step: float = 0.04
    guidance_scale: float = 1.0
    guidance_interval: tuple[float, float] = (0.0, 1.0)
    stochastic: bool = True
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0 < self.last_step < 1 or (self.steps == 1 and self.last_step == 1)):
            raise ValueError(f"last_step must lie in (0, 1), got {self.last_step}")
        a, b = self.guidance_interval
        if not (0 <= a <= b <= 1):
            raise ValueError(f"guidance interval must satisfy 0 <= a <= b <= 1, got {self.guidance_interval}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


@dataclass(frozen=True)
class TrajectorySchedule:
    """Ascending boundaries ``0 = t_0 < ... < t_N = 1``; the step ``[t_0, t_1]`` is taken last."""

    boundaries: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        """Step sizes in sampling order (from ``t = 1`` towards 0)."""
        return np.diff(self.boundaries)[::-1]

    def __len__(self) -> int:
        return len(self.boundaries) - 1


def build_schedule(cfg: SamplerConfig) -> TrajectorySchedule:
    """``steps - 1`` uniform steps over ``[last_step, 1]`` followed by one step of ``last_step``."""
    n, last = cfg.steps, cfg.last_step
    if n == 1:
        if last != 1:
            raise ValueError("a single-step schedule needs last_step == 1")
        return TrajectorySchedule(np.array([0.0, 1.0]))
    if not (1 - last) / (n - 1) > 0:
        raise ValueError("last_step leaves no room for the remaining steps")
    interior = last + (1 - last) * np.arange(n) / (n - 1)
    interior[-1] = 1.0
    return TrajectorySchedule(np.concatenate([[0.0], interior]))


def _guided_velocity(model, x, t: float, labels, null, cfg: SamplerConfig):
    tt = torch.full((x.shape[0],), t, dtype=x.dtype)
    v_cond = model(x, tt, labels)
    a, b = cfg.guidance_interval
    if cfg.guidance_scale == 1.0 or not (a <= t <= b):
        return v_cond
    v_uncond = model(x, tt, null)
    return v_uncond + cfg.guidance_scale * (v_cond - v_uncond)


def _sample_shard(model, cfg, sched, labels, null, shape, seed, shard, dtype):
    gen = torch.Generator().manual_seed(derive_seed(seed, shard))
    x = torch.randn((labels.shape[0], *shape), generator=gen, dtype=dtype)
    t_grid = sched.boundaries
    for k in range(len(t_grid) - 1, 0, -1):
        t, h = float(t_grid[k]), float(t_grid[k] - t_grid[k - 1])
        v = _guided_velocity(model, x, t, labels, null, cfg)
        if cfg.stochastic and k > 1 and cfg.noise_scale > 0:
            drift = v + 0.5 * cfg.noise_scale * (x + (1 - t) * v)
            noise = torch.randn(x.shape, generator=gen, dtype=dtype)
            x = x - h * drift + math.sqrt(cfg.noise_scale * t * h) * noise
        else:
            x = x - h * v
    return x


@torch.no_grad()
def sample(model, cfg: SamplerConfig, labels, seed: int = 0, latent_shape=None,
           null_label: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Integrate from Gaussian noise at ``t = 1`` to ``t = 0``.

    Guidance ``v_u + w (v_c - v_u)`` is used only for ``t`` inside the
    guidance interval and ``w != 1``; elsewhere the conditional velocity is
    used as is. In stochastic mode every step except the last adds noise of
    variance ``noise_scale * t * h`` with the matching score correction to
    the drift (score derived from the velocity). Samples are processed in
    shards of ``SHARD_SIZE``, each drawing from its own generator seeded
    by ``(seed, shard index)``, so results do not depend on how work is split.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    shape = tuple(latent_shape or model.latent_shape)
    null = null_label if null_label is not None else getattr(model, "null_label", None)
    if cfg.guidance_scale != 1.0 and null is None:
        raise ValueError("guidance needs a null label")
    sched = build_schedule(cfg)
    out = []
    for shard, start in enumerate(range(0, labels.shape[0], SHARD_SIZE)):
        lab = labels[start:start + SHARD_SIZE]
        null_lab = torch.full_like(lab, null) if null is not None else None
        out.append(_sample_shard(model, cfg, sched, lab, null_lab, shape, seed, shard, dtype))
    return torch.cat(out) if out else torch.empty((0, *shape), dtype=dtype)


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@torch.no_grad()
def generate_images(vae: VaeModel, ours: NormStats, ref: NormStats, method, model: Denoiser,
                    cfg: SamplerConfig, labels, seed: int = 0,
                    latent_scale: float = SD_LATENT_SCALE) -> tuple[torch.Tensor, torch.Tensor, dict]:
    """Sample latents, undo the normalization and decode.

    Returns ``(images, latents, metadata)``; ``latents`` are in the VAE's
    own latent space.
    """
    grid = model.latent_shape
    if grid[-1] != vae.latent_dim:
        raise ShapeError(f"denoiser latent dim {grid[-1]} != VAE latent dim {vae.latent_dim}")
    z_norm = sample(model, cfg, labels, seed=seed)
    z = normalize_decode(z_norm / latent_scale, ours, ref, method)
    images = decode(vae, z, clamp=True)
    meta = {
        "vae_hash": state_hash(vae),
        "denoiser_hash": state_hash(model),
        "norm_stats": ours.to_dict(),
        "reference_stats": ref.to_dict(),
        "norm_method": NormMethod.parse(method).value,
        "latent_scale": latent_scale,
        "sampler": {"steps": cfg.steps, "last_step": cfg.last_step, "guidance_scale": cfg.guidance_scale,
                    "guidance_interval": list(cfg.guidance_interval), "stochastic": cfg.stochastic,
                    "noise_scale": cfg.noise_scale},
        "seed": int(seed),
    }
    return images, z, meta
