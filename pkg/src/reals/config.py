"""Run configuration: a sectioned INI file mapped onto nested dataclasses.

Every key must belong to the schema below; unknown sections or keys are
errors, so a typo in a loss weight cannot silently fall back to a default.
Tuples are written comma-separated, booleans as ``true``/``false``.

Schema (section: keys)::

    run:       name, seed, out_dir, checkpoint_every, log_every
    data:      kind (synthetic|folder), path, n_images, image_size, n_classes, seed
    vae:       p, latent_dim, widths
    teacher:   kind (synthetic|cached|external), seed, patch_size, feature_dim,
               context_weight, cache_dir, adapter (module:callable)
    align:     depth, hidden (0 = max(D', 4 D)), use_patch, use_cls, normalize_teacher
    loss:      lambda_g, lambda_p, lambda_k, lambda_a, lambda1, lambda2,
               gan_warmup, disc_width, perceptual_seed
    optim:     vae_lr, vae_min_lr, vae_schedule (cosine|constant), vae_batch,
               vae_steps, vae_epochs, disc_lr, weight_decay,
               diffusion_lr, diffusion_batch, diffusion_steps
    norm:      method (maxmin|std), sample_count, reference (sd-vae | path to json)
    diffusion: width, depth, cfg_dropout, latent_scale, checkpoint_every
    sampler:   steps, last_step, cfg_scale, cfg_interval, stochastic, noise_scale
    eval:      n_images, seed, pooling, sampled, cluster_pool, perplexity
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    name: str = "run"
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 500
    log_every: int = 1


@dataclass
class DataSection:
    kind: str = "synthetic"
    path: str = ""
    n_images: int = 2000
    image_size: int = 32
    n_classes: int = 6
    seed: int = 0


@dataclass
class VaeSection:
    p: int = 8
    latent_dim: int = 4
    widths: tuple = (16, 32, 32)


@dataclass
class TeacherSection:
    kind: str = "synthetic"
    seed: int = 0
    patch_size: int = 14
    feature_dim: int = 32
    context_weight: float = 1.0
    cache_dir: str = ""
    adapter: str = ""


@dataclass
class AlignSection:
    depth: int = 2
    hidden: int = 0
    use_patch: bool = True
    use_cls: bool = True
    normalize_teacher: bool = False


@dataclass
class LossSection:
    lambda_g: float = 0.1
    lambda_p: float = 1.0
    lambda_k: float = 2e-5
    lambda_a: float = 1.0
    lambda1: float = 0.9
    lambda2: float = 0.1
    gan_warmup: int = 1000
    disc_width: int = 32
    perceptual_seed: int = 0


@dataclass
class OptimSection:
    vae_lr: float = 5e-5
    vae_min_lr: float = 0.0
    vae_schedule: str = "cosine"
    vae_batch: int = 64
    vae_steps: int = 0
    vae_epochs: int = 10
    disc_lr: float = 0.0
    weight_decay: float = 0.0
    diffusion_lr: float = 1e-4
    diffusion_batch: int = 256
    diffusion_steps: int = 0


@dataclass
class NormSection:
    method: str = "maxmin"
    sample_count: int = 10_000
    reference: str = "sd-vae"


@dataclass
class DiffusionSection:
    width: int = 256
    depth: int = 3
    cfg_dropout: float = 0.1
    latent_scale: float = 0.18215
    checkpoint_every: int = 1000


@dataclass
class SamplerSection:
    steps: int = 250
    last_step: float = 0.04
    cfg_scale: float = 1.0
    cfg_interval: tuple = (0.0, 1.0)
    stochastic: bool = True
    noise_scale: float = 1.0


@dataclass
class EvalSection:
    n_images: int = 256
    seed: int = 1
    pooling: str = "flatten"
    sampled: bool = False
    cluster_pool: str = "flatten"
    perplexity: float = 30.0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    vae: VaeSection = field(default_factory=VaeSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    align: AlignSection = field(default_factory=AlignSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    norm: NormSection = field(default_factory=NormSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output location is left out."""
        d = self.to_dict()
        d["run"].pop("out_dir")
        canon = json.dumps(_jsonable(d), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with ``{"section.key": value}`` overrides applied (values are coerced)."""
        cfg = from_dict(self.to_dict())
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            _set(cfg, section, key, value)
        return cfg

    def vae_steps(self) -> int:
        """Explicit ``vae_steps`` or ``vae_epochs`` converted at ``vae_batch`` images per step."""
        if self.optim.vae_steps > 0:
            return self.optim.vae_steps
        return self.optim.vae_epochs * math.ceil(self.data.n_images / self.optim.vae_batch)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _coerce(value, default, where: str):
    kind = type(default)
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("true", "yes", "1", "on"):
                return True
            if s in ("false", "no", "0", "off"):
                return False
            raise ValueError(value)
        if kind is tuple:
            items = value if isinstance(value, (list, tuple)) else [v for v in str(value).split(",") if v.strip()]
            elem = type(default[0]) if default else float
            return tuple(elem(float(v)) if elem is int else elem(v) for v in items)
        if kind is int:
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        if kind is float:
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: cannot read {value!r} as {kind.__name__}") from exc


def _set(cfg: RunConfig, section: str, key: str, value) -> None:
    if section not in {f.name for f in dataclasses.fields(RunConfig)}:
        raise ConfigError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(sec)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in [{section}] (valid: {', '.join(sorted(names))})")
    default = getattr(type(sec)(), key)
    setattr(sec, key, _coerce(value, default, f"[{section}] {key}"))


def from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    for section, values in d.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, value in values.items():
            _set(cfg, section, key, value)
    return cfg


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return from_dict({s: dict(parser.items(s)) for s in parser.sections()})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def save_config(cfg: RunConfig, path) -> None:
    lines = [f"# config hash {cfg.config_hash()}"]
    for section, values in cfg.to_dict().items():
        lines.append(f"\n[{section}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in values.items())
    Path(path).write_text("\n".join(lines) + "\n")


def toy_config(**overrides) -> RunConfig:
    """Desk-scale recipe: 32x32 synthetic shapes, p=8, D=4, synthetic teacher with D'=32.

    Learning rates and step counts are raised/shortened from the
    ImageNet-scale defaults so the whole pipeline trains on one CPU in
    minutes. ``overrides`` take ``section__key=value`` keyword arguments.
    """
    cfg = RunConfig()
    cfg = cfg.with_overrides({
        "run.checkpoint_every": 500,
        "vae.widths": (8, 16, 32),
        "run.log_every": 10,
        "optim.vae_lr": 2e-3,
        "optim.vae_batch": 32,
        "optim.vae_steps": 1000,
        "optim.disc_lr": 2e-4,
        "loss.gan_warmup": 600,
        "norm.sample_count": 4000,
        "optim.diffusion_lr": 1e-3,
        "optim.diffusion_batch": 128,
        "optim.diffusion_steps": 2000,
        "sampler.steps": 50,
    })
    return cfg.with_overrides({k.replace("__", "."): v for k, v in overrides.items()})
