"""Latent population statistics and range normalization onto a reference VAE.

Normalization is the affine map

    z' = (z - mean_ours) / spread_ours * spread_ref + mean_ref

with ``spread = max - min`` (``NormMethod.MAXMIN``) or ``spread = std``
(``NormMethod.STD``). Decoding applies the exact inverse.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np


class NormMethod(str, enum.Enum):
    MAXMIN = "maxmin"
    STD = "std"

    @classmethod
    def parse(cls, value) -> "NormMethod":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown normalization method {value!r}; expected 'maxmin' or 'std'")


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    min: float
    max: float
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("NormStats needs at least one element")
        if self.std < 0:
            raise ValueError("std must be non-negative")
        # mean may exceed the extremes by float rounding only
        slack = 1e-9 * max(1.0, abs(self.min), abs(self.max))
        if not (self.min - slack <= self.mean <= self.max + slack):
            raise ValueError(f"mean {self.mean} outside [{self.min}, {self.max}]")

    def spread(self, method: NormMethod) -> float:
        return self.max - self.min if NormMethod.parse(method) is NormMethod.MAXMIN else self.std

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["mean"]), float(d["std"]), float(d["min"]), float(d["max"]), int(d["sample_count"]))


def reference_table() -> dict:
    """Published reference rows (latent statistics, SC scores, constants), read-only."""
    text = resources.files("reals.resources").joinpath("reference.json").read_text()
    return json.loads(text)


def sd_vae_stats() -> NormStats:
    """Reference range of SD-VAE latents.

    Mean and extremes use the six-digit normalization constants; std comes
    from the 10,000-sample distribution table, which is the only place it
    is given.
    """
    ref = reference_table()
    c = ref["normalization_constants"]["sd_vae"]
    row = ref["latent_distribution_by_kl_weight"]["rows"][0]
    return NormStats(mean=c["mean"], std=row[2], min=c["min"], max=c["max"], sample_count=10_000)


def appendix_ours_stats() -> NormStats:
    """Published extremes and mean of the aligned VAE at kl weight 2e-5.

    Its std was never published, so it is stored as 0 and only the MaxMin
    method can use these statistics.
    """
    c = reference_table()["normalization_constants"]["ours"]
    return NormStats(mean=c["mean"], std=0.0, min=c["min"], max=c["max"], sample_count=10_000)


class StatsAccumulator:
    """Single-pass global mean/variance/min/max with mergeable partial states."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.min = math.inf
        self.max = -math.inf

    def update(self, values) -> "StatsAccumulator":
        a = np.asarray(values, dtype=np.float64).ravel()
        if a.size == 0:
            return self
        if not np.isfinite(a).all():
            raise ValueError("latents contain non-finite values")
        other = StatsAccumulator()
        other.count = a.size
        other.mean = float(a.mean())
        other.m2 = float(((a - other.mean) ** 2).sum())
        other.min = float(a.min())
        other.max = float(a.max())
        return self.merge(other)

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            self.min, self.max = other.min, other.max
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / n
        self.m2 += other.m2 + delta * delta * self.count * other.count / n
        self.count = n
        self.min = min(self.min, other.min)
        self.max = max(self.max, other.max)
        return self

    def result(self) -> NormStats:
        if self.count == 0:
            raise ValueError("cannot compute statistics of an empty latent stream")
        mean = min(max(self.mean, self.min), self.max)
        return NormStats(mean=mean, std=math.sqrt(max(self.m2, 0.0) / self.count),
                         min=self.min, max=self.max, sample_count=self.count)


def latent_stats(latents: Iterable) -> NormStats:
    """Global scalar statistics over every element of a stream of latent grids.

    ``std`` is the population standard deviation. Accepts numpy arrays or
    torch tensors; a single array is treated as a one-item stream.
    """
    if hasattr(latents, "shape"):
        latents = [latents]
    acc = StatsAccumulator()
    for z in latents:
        if hasattr(z, "detach"):
            z = z.detach().cpu().numpy()
        acc.update(z)
    return acc.result()


def _affine(ours: NormStats, ref: NormStats, method) -> tuple[float, float]:
    method = NormMethod.parse(method)
    s_o, s_r = ours.spread(method), ref.spread(method)
    if s_o == 0 or s_r == 0:
        raise ZeroDivisionError(f"zero {method.value} spread (ours={s_o}, ref={s_r})")
    return s_o, s_r


def normalize_encode(z, ours: NormStats, ref: NormStats, method=NormMethod.MAXMIN):
    """Map latents from this VAE's range onto the reference range."""
    s_o, s_r = _affine(ours, ref, method)
    return (z - ours.mean) / s_o * s_r + ref.mean


def normalize_decode(z, ours: NormStats, ref: NormStats, method=NormMethod.MAXMIN):
    """Inverse of :func:`normalize_encode`."""
    s_o, s_r = _affine(ours, ref, method)
    return (z - ref.mean) / s_r * s_o + ours.mean


def save_norm_stats(path, ours: NormStats, ref: NormStats | None = None,
                    method=NormMethod.MAXMIN, **provenance) -> None:
    ref = ref or sd_vae_stats()
    payload = {"ours": ours.to_dict(), "reference": ref.to_dict(),
               "method": NormMethod.parse(method).value, **provenance}
    Path(path).write_text(json.dumps(payload, indent=2))


def load_norm_stats(path) -> tuple[NormStats, NormStats, NormMethod, dict]:
    """Read a stats file; returns ``(ours, reference, method, provenance)``.

    A bare NormStats dict is also accepted (reference defaults to SD-VAE).
    """
    d = json.loads(Path(path).read_text())
    if "ours" not in d:
        return NormStats.from_dict(d), sd_vae_stats(), NormMethod.MAXMIN, {}
    extra = {k: v for k, v in d.items() if k not in ("ours", "reference", "method")}
    return (NormStats.from_dict(d["ours"]), NormStats.from_dict(d["reference"]),
            NormMethod.parse(d.get("method", "maxmin")), extra)
