"""Pixel- and latent-space losses and the weighted VAE training objective."""

from __future__ import annotations

import contextlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import AlignHeads, TeacherFeatures, alignment_loss, project
from .vae import GaussianPosterior, ShapeError, VaeModel, _groups, decode, encode, kl_to_standard_normal, reparameterize


class NonFiniteLossError(FloatingPointError):
    """A loss component is NaN or infinite; ``term`` names the offender."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss component {term!r} = {value}")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 0.1
    lambda_p: float = 1.0
    lambda_k: float = 2e-5
    lambda_a: float = 1.0
    lambda1: float = 0.9
    lambda2: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v!r}")


@dataclass
class LossReport:
    """Unweighted components plus the weighted total of one generator step."""

    mse: float
    gan_g: float
    perceptual: float
    kl: float
    align: float
    total: float
    d_loss: float = 0.0
    graph: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "graph"}


def reconstruction_mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).mean()


class RandomConvFeatures(nn.Module):
    """Frozen, seeded random conv stack used as the default perceptual extractor.

    Returns the activations after every stage; stages after the first
    halve the resolution.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        stages = []
        c = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(c, w, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c)))
                conv.bias.zero_()
            stages.append(conv)
            c = w
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = F.silu(conv(x))
            feats.append(x)
        return feats


def perceptual_loss(extractor, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Sum over extractor layers of the mean squared feature distance."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    with torch.no_grad():
        ref = extractor(x)
    out = extractor(x_hat)
    return sum((a - b).pow(2).mean() for a, b in zip(out, ref))


class Discriminator(nn.Module):
    """Small patch discriminator emitting one logit map per image."""

    def __init__(self, width: int = 32, warmup_steps: int = 1000):
        super().__init__()
        self.warmup_steps = int(warmup_steps)
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.GroupNorm(_groups(2 * width), 2 * width),
            nn.SiLU(),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)

    def active(self, step: int | None) -> bool:
        return step is None or step >= self.warmup_steps


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def hinge_d_loss(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - logits_real).mean() + F.relu(1.0 + logits_fake).mean()


def hinge_g_loss(logits_fake: torch.Tensor) -> torch.Tensor:
    return -logits_fake.mean()


def gan_losses(disc: Discriminator, x_real: torch.Tensor, x_fake: torch.Tensor,
               step: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Hinge ``(g_loss, d_loss)``; both are zero before the discriminator warmup.

    ``g_loss`` does not reach discriminator parameters and ``d_loss`` does
    not reach the generator (the fake batch is detached).
    """
    if not disc.active(step):
        zero = x_fake.new_zeros(())
        return zero, zero
    with frozen(disc):
        g_loss = hinge_g_loss(disc(x_fake))
    d_loss = hinge_d_loss(disc(x_real.detach()), disc(x_fake.detach()))
    return g_loss, d_loss


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(weights: LossWeights, mse, gan_g, perceptual, kl, align, d_loss=0.0) -> LossReport:
    """Weighted sum of the five generator terms.

    Components may be tensors (the weighted tensor sum is kept on
    ``report.graph`` for backprop) or plain floats. ``report.total`` is
    recomposed in Python floats from the recorded components.
    """
    comps = {"mse": mse, "gan_g": gan_g, "perceptual": perceptual, "kl": kl, "align": align, "d_loss": d_loss}
    values = {k: _scalar(v) for k, v in comps.items()}
    for k, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(k, v)
    w = weights
    total = (values["mse"] + w.lambda_g * values["gan_g"] + w.lambda_p * values["perceptual"]
             + w.lambda_k * values["kl"] + w.lambda_a * values["align"])
    graph = None
    if any(torch.is_tensor(v) and v.requires_grad for k, v in comps.items() if k != "d_loss"):
        graph = mse + w.lambda_g * gan_g + w.lambda_p * perceptual + w.lambda_k * kl + w.lambda_a * align
    return LossReport(total=total, graph=graph, **values)


@dataclass
class AlignOptions:
    use_patch: bool = True
    use_cls: bool = True
    normalize_teacher: bool = False


def generator_objective(vae: VaeModel, heads: AlignHeads, disc: Discriminator | None, extractor,
                        images: torch.Tensor, teacher: TeacherFeatures, noise: torch.Tensor,
                        weights: LossWeights, step: int | None = None,
                        align_opts: AlignOptions | None = None) -> tuple[LossReport, torch.Tensor]:
    """Full VAE objective for one batch; returns the report and the decoded batch.

    Alignment acts on the sampled ``z``. With ``lambda_a == 0`` the align term
    is only evaluated for logging, outside the autograd graph, so the heads
    receive no gradient at all.
    """
    align_opts = align_opts or AlignOptions()
    post: GaussianPosterior = encode(vae, images)
    z = reparameterize(post, noise)
    x_hat = decode(vae, z, clamp=False)
    mse = reconstruction_mse(images, x_hat)
    perc = perceptual_loss(extractor, images, x_hat) if weights.lambda_p > 0 else x_hat.new_zeros(())
    kl = kl_to_standard_normal(post)

    def _align(zz):
        return alignment_loss(project(heads, zz), teacher, weights.lambda1, weights.lambda2,
                              use_patch=align_opts.use_patch, use_cls=align_opts.use_cls,
                              normalize_teacher=align_opts.normalize_teacher)

    if weights.lambda_a > 0:
        align = _align(z)
    else:
        with torch.no_grad():
            align = _align(z.detach())
    if disc is not None and disc.active(step):
        with frozen(disc):
            g = hinge_g_loss(disc(x_hat))
    else:
        g = x_hat.new_zeros(())
    return total_loss(weights, mse, g, perc, kl, align), x_hat


def append_metrics(path, step: int, report: LossReport, weights: LossWeights, **extra) -> None:
    """Append one JSON line: step, every component, the weights and wall time."""
    row = {"step": int(step), **report.as_dict(), "weights": asdict(weights), "wall_time": time.time(), **extra}
    with open(path, "a") as f:
        f.write(json.dumps(row) + "\n")
