"""Training loops for the two phases: aligned VAE, then latent flow matching.

Run directory layout::

    <out>/config.ini              the RunConfig used
    <out>/vae/                    VAE + align heads + discriminator checkpoint
    <out>/norm_stats.json         latent statistics (required by phase two)
    <out>/metrics_vae.jsonl       one LossReport per logged step
    <out>/diffusion/              denoiser checkpoint
    <out>/metrics_diffusion.jsonl
    <out>/latent_cache.npz        encoded training latents (with --cache)

All randomness is derived from ``(run seed, purpose, step)``, so resuming
from a checkpoint replays exactly the same batches and noise.
"""

from __future__ import annotations

import importlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .alignment import AlignHeads, CachedTeacher, Teacher, TeacherFeatures, synthetic_teacher, teacher_features
from .checkpoint import load_meta, load_tensors, load_train_state, save_checkpoint
from .config import ConfigError, RunConfig, save_config
from .data import ImageDataset, derive_seed, load_dataset, torch_generator
from .diffusion import Denoiser, expected_normalized_moments, fm_training_loss, state_hash
from .latent_ops import NormMethod, NormStats, StatsAccumulator, load_norm_stats, normalize_encode, save_norm_stats, sd_vae_stats
from .objectives import (AlignOptions, Discriminator, LossWeights, NonFiniteLossError, RandomConvFeatures,
                         generator_objective, hinge_d_loss)
from .vae import VaeModel, encode, reparameterize

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A non-finite loss stopped training; the last checkpoint on disk is the last good state."""


class MissingNormStatsError(FileNotFoundError):
    """Latent diffusion training was started without a NormStats file."""


# -- builders ------------------------------------------------------------------

def build_teacher(cfg: RunConfig) -> Teacher:
    t = cfg.teacher
    if t.kind == "synthetic":
        return synthetic_teacher(t.seed, patch_size=t.patch_size, feature_dim=t.feature_dim,
                                 context_weight=t.context_weight)
    if t.kind == "cached":
        return CachedTeacher(t.cache_dir, t.patch_size, t.feature_dim)
    if t.kind == "external":
        module, _, attr = t.adapter.partition(":")
        if not module or not attr:
            raise ConfigError("teacher.adapter must look like 'package.module:factory'")
        return getattr(importlib.import_module(module), attr)(t)
    raise ConfigError(f"unknown teacher kind {t.kind!r}")


def build_vae(cfg: RunConfig) -> VaeModel:
    return VaeModel(cfg.vae.p, cfg.vae.latent_dim, tuple(cfg.vae.widths))


def build_heads(cfg: RunConfig) -> AlignHeads:
    return AlignHeads(cfg.vae.latent_dim, cfg.teacher.feature_dim, cfg.align.depth, cfg.align.hidden or None)


def loss_weights(cfg: RunConfig) -> LossWeights:
    l = cfg.loss
    return LossWeights(l.lambda_g, l.lambda_p, l.lambda_k, l.lambda_a, l.lambda1, l.lambda2)


def reference_stats(cfg: RunConfig) -> NormStats:
    if cfg.norm.reference in ("sd-vae", "sd_vae", ""):
        return sd_vae_stats()
    return load_norm_stats(cfg.norm.reference)[0]


def lr_at(step: int, total: int, lr: float, min_lr: float, schedule: str) -> float:
    if schedule == "constant":
        return lr
    if schedule != "cosine":
        raise ConfigError(f"unknown lr schedule {schedule!r}")
    return min_lr + 0.5 * (lr - min_lr) * (1 + math.cos(math.pi * step / max(total, 1)))


def _batch_indices(n: int, batch: int, *parts) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(*parts))
    return rng.choice(n, size=min(batch, n), replace=False)


def _seed_all(seed: int) -> None:
    torch.manual_seed(derive_seed(seed, "init") % (2 ** 63))


# -- phase one: VAE ------------------------------------------------------------

@dataclass
class VaeRun:
    out_dir: Path
    vae: VaeModel
    heads: AlignHeads
    stats: NormStats | None
    metrics_path: Path
    train_recon: float


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def train_vae(cfg: RunConfig, out_dir=None, *, resume: bool = False, stop_after: int | None = None,
              dataset: ImageDataset | None = None, teacher: Teacher | None = None) -> VaeRun:
    """Train the aligned VAE, save the checkpoint, compute NormStats and log every step.

    ``stop_after`` ends the run early (after saving a resumable checkpoint)
    without computing statistics; ``resume`` continues from ``<out>/vae``.
    """
    out = Path(out_dir or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    seed, chash = cfg.run.seed, cfg.config_hash()
    dataset = dataset if dataset is not None else load_dataset(cfg)
    teacher = teacher or build_teacher(cfg)
    feats = teacher_features(teacher, dataset.images, cfg.vae.p)

    _seed_all(seed)
    vae, heads = build_vae(cfg), build_heads(cfg)
    disc = Discriminator(cfg.loss.disc_width, cfg.loss.gan_warmup)
    extractor = RandomConvFeatures(cfg.loss.perceptual_seed)
    weights = loss_weights(cfg)
    align_opts = AlignOptions(cfg.align.use_patch, cfg.align.use_cls, cfg.align.normalize_teacher)
    opt_g = torch.optim.AdamW(list(vae.parameters()) + list(heads.parameters()), lr=cfg.optim.vae_lr,
                              weight_decay=cfg.optim.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=cfg.optim.disc_lr or cfg.optim.vae_lr,
                              weight_decay=cfg.optim.weight_decay)
    total = cfg.vae_steps()
    metrics = out / "metrics_vae.jsonl"
    ckpt = out / "vae"
    start = 0
    if resume:
        start = _restore_vae(ckpt, vae, heads, disc, opt_g, opt_d)
        rows = [r for r in _read_metrics(metrics) if r["step"] < start]
        metrics.write_text("".join(json.dumps(r) + "\n" for r in rows))
    elif metrics.exists():
        metrics.unlink()

    def save(step):
        meta = {"p": cfg.vae.p, "latent_dim": cfg.vae.latent_dim, "widths": list(cfg.vae.widths),
                "feature_dim": cfg.teacher.feature_dim, "align_depth": cfg.align.depth,
                "align_hidden": heads.hidden, "seed": seed, "config_hash": chash, "step": step,
                "config": cfg.to_dict()}
        state = {"step": step, "opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict()}
        save_checkpoint(ckpt, {"vae": vae, "heads": heads, "disc": disc}, meta, state)

    end = total if stop_after is None else min(total, stop_after)
    vae.train()
    for step in range(start, end):
        lr = lr_at(step, total, cfg.optim.vae_lr, cfg.optim.vae_min_lr, cfg.optim.vae_schedule)
        for g in opt_g.param_groups:
            g["lr"] = lr
        idx = torch.from_numpy(_batch_indices(len(dataset), cfg.optim.vae_batch, seed, "vae-batch", step))
        images = dataset.images[idx]
        gen = torch_generator(seed, "vae-noise", step)
        noise = torch.randn((len(idx), images.shape[2] // cfg.vae.p, images.shape[3] // cfg.vae.p,
                             cfg.vae.latent_dim), generator=gen)
        try:
            report, x_hat = generator_objective(vae, heads, disc, extractor, images, feats[idx], noise,
                                                weights, step, align_opts)
        except NonFiniteLossError as exc:
            raise TrainingDiverged(f"step {step}: {exc}; last good checkpoint kept in {ckpt}") from exc
        opt_g.zero_grad(set_to_none=True)
        report.graph.backward()
        opt_g.step()
        if disc.active(step):
            d_loss = hinge_d_loss(disc(images), disc(x_hat.detach()))
            if not torch.isfinite(d_loss):
                raise TrainingDiverged(f"step {step}: non-finite discriminator loss; last good checkpoint kept")
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            report.d_loss = float(d_loss.detach())
        if step % cfg.run.log_every == 0 or step == total - 1:
            row = {"step": step, **report.as_dict(), "weights": weights.__dict__, "lr": lr,
                   "config_hash": chash, "seed": seed, "wall_time": time.time()}
            with open(metrics, "a") as f:
                f.write(json.dumps(row) + "\n")
        if cfg.run.checkpoint_every and (step + 1) % cfg.run.checkpoint_every == 0:
            save(step + 1)
    save(end)
    vae.eval()
    heads.eval()
    rows = _read_metrics(metrics)
    tail = rows[-max(1, len(rows) // 10):]
    train_recon = float(np.mean([r["mse"] for r in tail])) if tail else float("nan")
    stats = None
    if end == total:
        stats = compute_norm_stats(vae, dataset, cfg.norm.sample_count, seed)
        save_norm_stats(out / "norm_stats.json", stats, reference_stats(cfg), cfg.norm.method,
                        config_hash=chash, seed=seed, vae_hash=state_hash(vae), train_recon=train_recon)
    return VaeRun(out, vae, heads, stats, metrics, train_recon)


def _restore_vae(ckpt, vae, heads, disc, opt_g, opt_d) -> int:
    tensors = load_tensors(ckpt)
    vae.load_state_dict(tensors["vae"])
    heads.load_state_dict(tensors["heads"])
    disc.load_state_dict(tensors["disc"])
    state = load_train_state(ckpt)
    if state is None:
        raise FileNotFoundError(f"{ckpt} has no resumable training state")
    opt_g.load_state_dict(state["opt_g"])
    opt_d.load_state_dict(state["opt_d"])
    return int(state["step"])


@torch.no_grad()
def encode_latents(vae: VaeModel, images: torch.Tensor, seed: int, tag: str = "encode",
                   sampled: bool = True, batch_size: int = 256) -> torch.Tensor:
    """Posterior samples (or means) for ``images``; batch ``k`` uses noise from ``(seed, tag, k)``."""
    out = []
    for k, start in enumerate(range(0, len(images), batch_size)):
        post = encode(vae, images[start:start + batch_size])
        if sampled:
            noise = torch.randn(post.mu.shape, generator=torch_generator(seed, tag, k))
            out.append(reparameterize(post, noise))
        else:
            out.append(post.mu)
    return torch.cat(out)


@torch.no_grad()
def compute_norm_stats(vae: VaeModel, dataset: ImageDataset, sample_count: int, seed: int,
                       batch_size: int = 256) -> NormStats:
    """Statistics of ``sample_count`` sampled latents, cycling through the dataset."""
    acc = StatsAccumulator()
    order = np.arange(sample_count) % len(dataset)
    for k, start in enumerate(range(0, sample_count, batch_size)):
        idx = torch.from_numpy(order[start:start + batch_size])
        post = encode(vae, dataset.images[idx])
        z = reparameterize(post, torch.randn(post.mu.shape, generator=torch_generator(seed, "stats", k)))
        acc.update(z.numpy())
    return acc.result()


def load_vae(directory) -> tuple[VaeModel, AlignHeads, dict]:
    meta = load_meta(directory)
    tensors = load_tensors(directory)
    vae = VaeModel(meta["p"], meta["latent_dim"], tuple(meta["widths"]))
    vae.load_state_dict(tensors["vae"])
    heads = AlignHeads(meta["latent_dim"], meta["feature_dim"], meta["align_depth"], meta["align_hidden"])
    heads.load_state_dict(tensors["heads"])
    return vae.eval(), heads.eval(), meta


# -- phase two: latent flow matching -------------------------------------------

@dataclass
class DiffusionRun:
    out_dir: Path
    model: Denoiser
    losses: list[float]
    metrics_path: Path


def _prepare_latents(cfg, vae, dataset, ours, ref, method, cache_path: Path | None, key: str) -> torch.Tensor:
    if cache_path is not None and cache_path.exists():
        with np.load(cache_path) as f:
            if str(f["key"]) == key:
                return torch.from_numpy(f["latents"])
            log.info("latent cache %s is stale, re-encoding", cache_path)
    z = encode_latents(vae, dataset.images, cfg.run.seed, "diffusion-encode")
    z = normalize_encode(z, ours, ref, method) * cfg.diffusion.latent_scale
    z = z.float()
    if cache_path is not None:
        np.savez(cache_path, latents=z.numpy(), key=np.array(key))
    return z


def train_diffusion(cfg: RunConfig, out_dir=None, *, vae_dir=None, stats_path=None, cache: bool = False,
                    dataset: ImageDataset | None = None) -> DiffusionRun:
    """Train the toy denoiser on normalized latents of the training set.

    Refuses to start without a NormStats file, and requires an explicit
    ``optim.diffusion_steps``.
    """
    out = Path(out_dir or cfg.run.out_dir)
    vae_dir = Path(vae_dir or out / "vae")
    stats_path = Path(stats_path or out / "norm_stats.json")
    if not stats_path.exists():
        raise MissingNormStatsError(f"no NormStats file at {stats_path}; run latent statistics first")
    if cfg.optim.diffusion_steps <= 0:
        raise ConfigError("optim.diffusion_steps must be set explicitly for diffusion training")
    out.mkdir(parents=True, exist_ok=True)
    ours, ref, method, _ = load_norm_stats(stats_path)
    vae, _, meta = load_vae(vae_dir)
    if meta["latent_dim"] != cfg.vae.latent_dim or meta["p"] != cfg.vae.p:
        raise ConfigError(f"VAE checkpoint (p={meta['p']}, D={meta['latent_dim']}) does not match config "
                          f"(p={cfg.vae.p}, D={cfg.vae.latent_dim})")
    dataset = dataset if dataset is not None else load_dataset(cfg)
    seed, chash = cfg.run.seed, cfg.config_hash()
    key = f"{state_hash(vae)}:{stats_path.read_text()}:{seed}:{cfg.diffusion.latent_scale}:{len(dataset)}"
    latents = _prepare_latents(cfg, vae, dataset, ours, ref, method,
                               out / "latent_cache.npz" if cache else None, key)
    expected = expected_normalized_moments(ours, ref, method, cfg.diffusion.latent_scale)

    _seed_all(derive_seed(seed, "diffusion"))
    model = Denoiser(tuple(latents.shape[1:]), dataset.n_classes, cfg.diffusion.width, cfg.diffusion.depth)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.diffusion_lr, weight_decay=cfg.optim.weight_decay)
    metrics = out / "metrics_diffusion.jsonl"
    if metrics.exists():
        metrics.unlink()
    ckpt = out / "diffusion"

    def save(step):
        meta = {"latent_shape": list(model.latent_shape), "n_classes": model.n_classes, "width": model.width,
                "depth": model.depth, "seed": seed, "config_hash": chash, "step": step,
                "vae_hash": state_hash(vae), "latent_scale": cfg.diffusion.latent_scale,
                "norm_method": NormMethod.parse(method).value, "config": cfg.to_dict()}
        save_checkpoint(ckpt, {"denoiser": model}, meta, {"step": step, "opt": opt.state_dict()})

    losses = []
    total = cfg.optim.diffusion_steps
    with open(metrics, "a") as f:
        for step in range(total):
            idx = torch.from_numpy(_batch_indices(len(latents), cfg.optim.diffusion_batch, seed, "fm-batch", step))
            gen = torch_generator(seed, "fm-noise", step)
            loss = fm_training_loss(model, latents[idx], dataset.labels[idx], gen, cfg.diffusion.cfg_dropout,
                                    expected=expected)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"diffusion step {step}: non-finite loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if step % cfg.run.log_every == 0 or step == total - 1:
                f.write(json.dumps({"step": step, "fm_loss": losses[-1], "lr": cfg.optim.diffusion_lr,
                                    "config_hash": chash, "seed": seed, "wall_time": time.time()}) + "\n")
            if cfg.diffusion.checkpoint_every and (step + 1) % cfg.diffusion.checkpoint_every == 0:
                save(step + 1)
    save(total)
    model.eval()
    return DiffusionRun(out, model, losses, metrics)


def load_denoiser(directory) -> tuple[Denoiser, dict]:
    meta = load_meta(directory)
    model = Denoiser(tuple(meta["latent_shape"]), meta["n_classes"], meta["width"], meta["depth"])
    model.load_state_dict(load_tensors(directory)["denoiser"])
    return model.eval(), meta


def teacher_cls_features(cfg: RunConfig, images: torch.Tensor, teacher: Teacher | None = None) -> TeacherFeatures:
    return teacher_features(teacher or build_teacher(cfg), images, cfg.vae.p)
