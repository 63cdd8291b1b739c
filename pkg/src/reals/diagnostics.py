"""Latent-space audits and generation metrics.

Covers augmentation-based semantic consistency, token attention maps,
clustering quality with a t-SNE export, Gaussian feature statistics with
the Fréchet distance, and export of semantic features from latents.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import AlignHeads, TeacherFeatures, project, read_feature_cache, write_feature_cache
from .latent_ops import reference_table
from .vae import ShapeError, VaeModel, encode, reparameterize

log = logging.getLogger(__name__)

SC_COLUMNS = ("Crop", "Flip", "GaussianBlur", "Grayscale", "All")


# -- augmentations -----------------------------------------------------------

class Augmentation:
    name = "identity"

    def __call__(self, img: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        return img

    def params(self) -> dict:
        return {k: v for k, v in vars(self).items() if not k.startswith("_")}


class Identity(Augmentation):
    pass


class RandomCrop(Augmentation):
    """Crop a random square-ratio window covering ``scale`` of each side, resize back."""

    name = "Crop"

    def __init__(self, scale: tuple[float, float] = (0.5, 0.9)):
        self.scale = tuple(scale)

    def __call__(self, img, rng):
        _, H, W = img.shape
        s = rng.uniform(*self.scale)
        h, w = max(1, int(round(H * s))), max(1, int(round(W * s)))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        crop = img[:, top:top + h, left:left + w]
        return F.interpolate(crop[None], size=(H, W), mode="bilinear", align_corners=False)[0]


class HorizontalFlip(Augmentation):
    name = "Flip"

    def __init__(self, p: float = 0.5):
        self.p = p

    def __call__(self, img, rng):
        return img.flip(-1) if rng.random() < self.p else img


class GaussianBlur(Augmentation):
    name = "GaussianBlur"

    def __init__(self, sigma: tuple[float, float] = (0.5, 2.0), kernel_size: int = 7):
        self.sigma = tuple(sigma)
        self.kernel_size = kernel_size

    def __call__(self, img, rng):
        sigma = rng.uniform(*self.sigma)
        r = self.kernel_size // 2
        x = torch.arange(-r, r + 1, dtype=img.dtype)
        k = torch.exp(-0.5 * (x / sigma) ** 2)
        k = k / k.sum()
        c = img.shape[0]
        out = F.pad(img[None], (r, r, r, r), mode="reflect")
        out = F.conv2d(out, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
        out = F.conv2d(out, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
        return out[0]


class Grayscale(Augmentation):
    name = "Grayscale"

    def __init__(self, p: float = 0.5):
        self.p = p

    def __call__(self, img, rng):
        if rng.random() >= self.p:
            return img
        lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        return lum.expand_as(img).clone()


class AugmentationPipeline:
    """Ordered composition of augmentations, replayable from a numpy Generator."""

    def __init__(self, augmentations=(), name: str | None = None):
        self.augmentations = list(augmentations)
        self.name = name or "+".join(a.name for a in self.augmentations) or "identity"

    def __call__(self, images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        out = []
        for img in images:
            for aug in self.augmentations:
                img = aug(img, rng)
            out.append(img)
        return torch.stack(out) if out else images

    def describe(self) -> list[dict]:
        return [{"type": type(a).__name__, **a.params()} for a in self.augmentations]


def standard_augmentations() -> dict[str, AugmentationPipeline]:
    """One pipeline per column of the published SC table, with default parameters."""
    return {
        "Crop": AugmentationPipeline([RandomCrop()], "Crop"),
        "Flip": AugmentationPipeline([HorizontalFlip()], "Flip"),
        "GaussianBlur": AugmentationPipeline([GaussianBlur()], "GaussianBlur"),
        "Grayscale": AugmentationPipeline([Grayscale()], "Grayscale"),
        "All": AugmentationPipeline([RandomCrop(), HorizontalFlip(), GaussianBlur(), Grayscale()], "All"),
    }


# -- semantic consistency ----------------------------------------------------

@dataclass
class SCReport:
    scores: dict[str, float]
    sample_count: int
    encoder_id: str = ""
    per_image: dict[str, list[float]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for k, v in self.scores.items():
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"SC for {k} = {v} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {"encoder_id": self.encoder_id, "sample_count": self.sample_count,
                "rows": [{"augmentation": k, "sc": v} for k, v in self.scores.items()]}


def _as_encoder(encoder, sampled: bool, seed: int) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(encoder, VaeModel):
        gen = torch.Generator().manual_seed(seed)

        @torch.no_grad()
        def run(images):
            post = encode(encoder, images)
            if not sampled:
                return post.mu
            return reparameterize(post, torch.randn(post.mu.shape, generator=gen, dtype=post.mu.dtype))

        return run
    return encoder


def latent_cosine(z1: torch.Tensor, z2: torch.Tensor, pooling: str = "flatten") -> torch.Tensor:
    """Per-item cosine similarity of two latent batches ``(B, g_h, g_w, D)``.

    ``pooling="flatten"`` compares whole grids; ``"token"`` averages the
    per-token cosines.
    """
    if z1.shape != z2.shape:
        raise ShapeError(f"latent shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    z1, z2 = z1.double(), z2.double()
    if pooling == "flatten":
        a, b = z1.flatten(1), z2.flatten(1)
    elif pooling == "token":
        a, b = z1.reshape(-1, z1.shape[-1]), z2.reshape(-1, z2.shape[-1])
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm latent in semantic consistency")
    cos = ((a * b).sum(-1) / (na * nb)).clamp(-1.0, 1.0)
    if pooling == "token":
        cos = cos.view(z1.shape[0], -1).mean(dim=1)
    return cos


def semantic_consistency(encoder, corpus: torch.Tensor, augmentations=None, seed: int = 0,
                         sampled: bool = False, pooling: str = "flatten", batch_size: int = 256,
                         encoder_id: str = "") -> SCReport:
    """Mean cosine similarity between latents of two independent augmentations of each image.

    Args:
        encoder: A :class:`VaeModel` (the posterior mean is used unless
            ``sampled``) or any callable mapping images to latent grids.
        corpus: ``(N, 3, H, W)`` images.
        augmentations: Mapping name -> pipeline, or name -> ``(pipeline_a,
            pipeline_b)`` to give the two branches different pipelines.
            Defaults to :func:`standard_augmentations`.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if augmentations is None:
        augmentations = standard_augmentations()
    elif isinstance(augmentations, AugmentationPipeline):
        augmentations = {augmentations.name: augmentations}
    enc = _as_encoder(encoder, sampled, seed)
    scores, per_image = {}, {}
    for idx, (name, aug) in enumerate(augmentations.items()):
        aug_a, aug_b = aug if isinstance(aug, tuple) else (aug, aug)
        rng_a = np.random.default_rng([seed, idx, 0])
        rng_b = np.random.default_rng([seed, idx, 1])
        sims = []
        for start in range(0, len(corpus), batch_size):
            batch = corpus[start:start + batch_size]
            z1 = enc(aug_a(batch, rng_a))
            z2 = enc(aug_b(batch, rng_b))
            sims.append(latent_cosine(z1, z2, pooling))
        sims = torch.cat(sims).double()
        scores[name] = float(sims.mean().clamp(-1, 1))
        per_image[name] = sims.tolist()
    return SCReport(scores, len(corpus), encoder_id, per_image)


def sc_fixture_comparison(report: SCReport) -> list[dict]:
    """Rows comparing measured SC with the published SD-VAE / aligned-VAE rows (directional only)."""
    ref = reference_table()["semantic_consistency"]
    rows = []
    for i, col in enumerate(ref["columns"]):
        measured = report.scores.get(col)
        row = {"augmentation": col, "measured": measured}
        for name, values in ref["rows"].items():
            row[f"reference_{name}"] = values[i]
        rows.append(row)
    return rows


# -- attention maps and clustering -------------------------------------------

def attention_map(z: torch.Tensor, i: int, j: int) -> np.ndarray:
    """Cosine similarity of token ``(i, j)`` to every token, min-max rescaled to [0, 1].

    ``z`` is a single grid ``(g_h, g_w, D)`` (or a batch of one). A constant
    similarity map rescales to all ones.
    """
    z = torch.as_tensor(z, dtype=torch.float64)
    if z.ndim == 4:
        if z.shape[0] != 1:
            raise ShapeError("attention_map takes a single latent grid")
        z = z[0]
    gh, gw, _ = z.shape
    if not (0 <= i < gh and 0 <= j < gw):
        raise IndexError(f"token ({i}, {j}) outside {gh}x{gw} grid")
    tokens = F.normalize(z.reshape(-1, z.shape[-1]), dim=-1, eps=1e-12)
    sim = (tokens @ tokens[i * gw + j]).reshape(gh, gw).numpy()
    lo, hi = sim.min(), sim.max()
    if hi - lo < 1e-12:
        return np.ones_like(sim)
    return (sim - lo) / (hi - lo)


def _pool_latents(latents, pool: str) -> np.ndarray:
    x = latents.detach().cpu().numpy() if torch.is_tensor(latents) else np.asarray(latents)
    if pool == "mean" and x.ndim == 4:
        return x.mean(axis=(1, 2))
    return x.reshape(len(x), -1)


def clustering_report(latents, labels, pool: str = "flatten", tsne: bool = True,
                      perplexity: float = 30.0, seed: int = 0) -> dict:
    """Silhouette score of latents grouped by class, plus an optional 2-D t-SNE export.

    If every latent is identical the silhouette is defined as 0.
    """
    from sklearn.manifold import TSNE
    from sklearn.metrics import silhouette_score

    X = _pool_latents(latents, pool).astype(np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("clustering needs at least two classes")
    if counts.min() < 2:
        raise ValueError("clustering needs at least two points per class")
    if np.ptp(X, axis=0).max() == 0:
        sil = 0.0
    else:
        sil = float(silhouette_score(X, y))
    out = {"silhouette": sil, "pool": pool, "n": int(len(X)), "tsne_export": [], "perplexity": perplexity,
           "seed": seed}
    if tsne:
        perp = min(perplexity, max(1.0, (len(X) - 1) / 3))
        emb = TSNE(n_components=2, perplexity=perp, random_state=seed, init="pca").fit_transform(X)
        out["tsne_export"] = [(float(a), float(b), int(c)) for (a, b), c in zip(emb, y)]
    return out


def write_tsne_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "label"])
        w.writerows(points)


# -- Gaussian statistics and Fréchet distance --------------------------------

@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ShapeError(f"covariance {self.cov.shape} does not match mean dim {d}")
        self.cov = 0.5 * (self.cov + self.cov.T)


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the matrix root is the sum of square roots of the
    eigenvalues of ``S_a^{1/2} S_b S_a^{1/2}``, which shares its spectrum
    with ``S_a S_b`` but is symmetric.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.cov)
    _psd_sqrt(b.cov)
    inner = root_a @ b.cov @ root_a
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    if d < -1e-8 * max(1.0, np.trace(a.cov) + np.trace(b.cov)):
        raise FloatingPointError(f"Fréchet distance came out negative ({d})")
    return max(d, 0.0)


def feature_statistics(feature_fn, samples, batch_size: int = 512) -> GaussianSummary:
    """Sample mean and unbiased covariance of ``feature_fn`` over ``samples``.

    ``feature_fn=None`` uses the samples (flattened) as features. Fewer than
    ``dim + 1`` samples gives a rank-deficient covariance and logs a warning.
    """
    if len(samples) == 0:
        raise ValueError("no samples")
    feats = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out = feature_fn(chunk) if feature_fn is not None else chunk
        if torch.is_tensor(out):
            out = out.detach().cpu().numpy()
        feats.append(np.asarray(out, dtype=np.float64).reshape(len(chunk), -1))
    X = np.concatenate(feats)
    n, d = X.shape
    if n < d + 1:
        log.warning("only %d samples for %d-dim features: covariance is rank deficient", n, d)
    cov = np.cov(X, rowvar=False) if n > 1 else np.zeros((d, d))
    return GaussianSummary(X.mean(axis=0), np.atleast_2d(cov), n)


def inception_score(probs) -> float:
    """``exp(E_x KL(p(y|x) || p(y)))`` from per-sample class probabilities ``(N, K)``."""
    p = np.asarray(probs, dtype=np.float64)
    marginal = p.mean(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0).sum(axis=1)
    return float(np.exp(kl.mean()))


def psnr(x, y, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio for images in ``[-1, 1]``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    mse = np.mean((x - y) ** 2)
    return math.inf if mse == 0 else float(10 * np.log10(data_range ** 2 / mse))


def ssim(x, y, data_range: float = 2.0) -> float:
    """Mean SSIM over a batch of ``(B, 3, H, W)`` images."""
    from skimage.metrics import structural_similarity

    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    vals = [structural_similarity(a, b, channel_axis=0, data_range=data_range, win_size=7)
            for a, b in zip(x, y)]
    return float(np.mean(vals))


# -- semantic features of latents --------------------------------------------

@torch.no_grad()
def extract_semantic_features(heads: AlignHeads, z: torch.Tensor) -> TeacherFeatures:
    """Patch and cls projections of latents through trained alignment heads."""
    was_training = heads.training
    heads.eval()
    try:
        patch, cls = project(heads, z)
    finally:
        heads.train(was_training)
    return TeacherFeatures(patch, cls)


def export_semantic_features(directory, z: torch.Tensor, features: TeacherFeatures) -> list[str]:
    """Write features in the cached-teacher layout, keyed by each latent's content hash."""
    return write_feature_cache(directory, list(z), features)


def import_semantic_features(directory, keys=None) -> TeacherFeatures:
    return read_feature_cache(directory, keys)


def centroid_proximity(features: torch.Tensor, labels, ref_features: torch.Tensor, ref_labels) -> float:
    """Fraction of features whose nearest (cosine) class centroid of ``ref_features`` is their own class."""
    f = F.normalize(torch.as_tensor(features, dtype=torch.float64), dim=-1)
    r = torch.as_tensor(ref_features, dtype=torch.float64)
    ref_labels = np.asarray(ref_labels)
    classes = np.unique(ref_labels)
    cents = torch.stack([r[torch.as_tensor(ref_labels == c)].mean(0) for c in classes])
    nearest = classes[(f @ F.normalize(cents, dim=-1).T).argmax(dim=1).numpy()]
    return float(np.mean(nearest == np.asarray(labels)))


def write_report(path, payload: Mapping) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, default=float))
