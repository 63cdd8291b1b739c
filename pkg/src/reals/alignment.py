"""Teacher features, alignment heads and the alignment loss.

A teacher is any object with ``patch_size``, ``feature_dim`` and an
``extract(images)`` method returning :class:`TeacherFeatures`. Images
handed to ``extract`` must already be resized with
:func:`teacher_input_size` so that the teacher's patch grid equals the
VAE latent grid; :func:`teacher_features` does the resize for you.

Wrapping a pretrained ViT means writing an ``extract`` that runs the
network on the resized batch and returns its patch tokens reshaped to
``(B, g_h, g_w, D')`` together with the class token ``(B, D')``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vae import ShapeError

COS_EPS = 1e-8


@dataclass
class TeacherFeatures:
    """Per-patch grid ``(B, g_h, g_w, D')`` and global feature ``(B, D')``."""

    patch: torch.Tensor
    cls: torch.Tensor

    def __post_init__(self):
        if self.patch.ndim != 4 or self.cls.ndim != 2:
            raise ShapeError("patch must be (B, g_h, g_w, D') and cls (B, D')")
        if self.patch.shape[0] != self.cls.shape[0] or self.patch.shape[-1] != self.cls.shape[-1]:
            raise ShapeError(f"patch {tuple(self.patch.shape)} and cls {tuple(self.cls.shape)} disagree")

    def __getitem__(self, idx) -> "TeacherFeatures":
        return TeacherFeatures(self.patch[idx], self.cls[idx])

    def to(self, *args, **kwargs) -> "TeacherFeatures":
        return TeacherFeatures(self.patch.to(*args, **kwargs), self.cls.to(*args, **kwargs))


@runtime_checkable
class Teacher(Protocol):
    patch_size: int
    feature_dim: int

    def extract(self, images: torch.Tensor) -> TeacherFeatures: ...


def teacher_input_size(H: int, W: int, p: int, p_prime: int) -> tuple[int, int]:
    """Input size for a teacher with patch size ``p_prime`` whose grid matches ``H/p x W/p``."""
    if H % p or W % p:
        raise ShapeError(f"{H}x{W} is not divisible by p={p}")
    return p_prime * (H // p), p_prime * (W // p)


def teacher_features(teacher: Teacher, images: torch.Tensor, p: int) -> TeacherFeatures:
    """Resize ``images`` for ``teacher`` and extract features on the VAE latent grid."""
    H, W = images.shape[-2:]
    size = teacher_input_size(H, W, p, teacher.patch_size)
    if size != (H, W):
        images = F.interpolate(images, size=size, mode="bilinear", align_corners=False)
    with torch.no_grad():
        return teacher.extract(images)


def _patchify(images: torch.Tensor, q: int) -> torch.Tensor:
    B, C, H, W = images.shape
    if H % q or W % q:
        raise ShapeError(f"teacher input {H}x{W} is not divisible by patch size {q}")
    x = images.reshape(B, C, H // q, q, W // q, q)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(B, H // q, W // q, C, q * q)


class SyntheticTeacher:
    """Frozen random-feature stand-in for a self-supervised ViT.

    Patch features are a fixed linear projection of each ``q x q`` patch plus
    a texture term ``tanh`` of the mean-centred patch and an object context
    term shared by every patch. The context comes from a crude figure/ground
    split: pixels far from the median border colour are foreground, and the
    foreground's colour and shape (fill ratio of its bounding box, vertical
    skew) are projected through fixed weights. The class feature projects the
    image's mean colour and the same object statistic, so images of one
    object class land near each other regardless of background texture.

    The colour branches are linear and the figure/ground split only sees
    colour differences, so shifting an image by a constant ``c`` (without
    clipping) moves every patch feature by exactly ``c * u_patch`` and the
    class feature by ``c * u_cls`` (see :meth:`shift_response`).
    """

    def __init__(self, seed: int = 0, patch_size: int = 14, feature_dim: int = 32,
                 context_weight: float = 1.0, texture_gain: float = 4.0, fg_threshold: float = 0.5):
        self.seed = int(seed)
        self.patch_size = int(patch_size)
        self.feature_dim = int(feature_dim)
        self.context_weight = float(context_weight)
        self.fg_threshold = float(fg_threshold)
        rng = np.random.default_rng(self.seed)
        k = 3 * self.patch_size ** 2
        d = self.feature_dim
        self._w = {
            "lin": rng.normal(0.0, 1.0 / np.sqrt(k), (k, d)),
            "tex": rng.normal(0.0, texture_gain / np.sqrt(k), (k, d)),
            "fg": rng.normal(0.0, 1.0, (3, d)),
            "shape": rng.normal(0.0, 1.5, (2, d)),
            "col": rng.normal(0.0, 1.0, (3, d)),
            "cls_fg": rng.normal(0.0, 1.0, (3, d)),
            "cls_shape": rng.normal(0.0, 1.5, (2, d)),
        }

    def _weights(self, like: torch.Tensor) -> dict[str, torch.Tensor]:
        return {k: torch.as_tensor(v, dtype=like.dtype, device=like.device) for k, v in self._w.items()}

    def object_statistics(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Foreground colour ``(B, 3)`` and shape descriptor ``(B, 2)``."""
        b, _, h, w = images.shape
        edge = max(1, min(h, w) // 16)
        border = torch.cat([images[..., :edge, :].flatten(2), images[..., -edge:, :].flatten(2),
                            images[..., :, :edge].flatten(2), images[..., :, -edge:].flatten(2)], dim=2)
        bg = border.median(dim=2).values[:, :, None, None]
        mask = ((images - bg).norm(dim=1) > self.fg_threshold).to(images.dtype)  # B, H, W
        area = mask.sum(dim=(1, 2)).clamp_min(1.0)
        fg = (images * mask[:, None]).sum(dim=(2, 3)) / area[:, None]
        rows, cols = mask.amax(dim=2), mask.amax(dim=1)
        fill = mask.sum(dim=(1, 2)) / (rows.sum(1) * cols.sum(1)).clamp_min(1.0)
        y = torch.linspace(-1.0, 1.0, h, dtype=images.dtype, device=images.device)
        py = mask.sum(dim=2) / area[:, None]
        my = (py * y).sum(1)
        var = (py * (y - my[:, None]) ** 2).sum(1).clamp_min(1e-6)
        skew = (py * (y - my[:, None]) ** 3).sum(1) / var ** 1.5
        shape = torch.stack([4.0 * (fill - 0.75), skew], dim=1)
        return fg, shape

    def extract(self, images: torch.Tensor) -> TeacherFeatures:
        w = self._weights(images)
        patches = _patchify(images, self.patch_size)  # B, gh, gw, C, q*q
        centred = patches - patches.mean(dim=-1, keepdim=True)
        lin = patches.flatten(-2) @ w["lin"]
        tex = torch.tanh(centred.flatten(-2) @ w["tex"])
        fg, shape = self.object_statistics(images)
        ctx = fg @ w["fg"] + torch.tanh(shape @ w["shape"])
        patch = lin + tex + self.context_weight * ctx[:, None, None, :]
        cls = images.mean(dim=(2, 3)) @ w["col"] + fg @ w["cls_fg"] + torch.tanh(shape @ w["cls_shape"])
        return TeacherFeatures(patch, cls)

    def shift_response(self) -> tuple[np.ndarray, np.ndarray]:
        """Feature change per unit additive intensity shift: ``(u_patch, u_cls)``."""
        u_patch = self._w["lin"].sum(axis=0) + self.context_weight * self._w["fg"].sum(axis=0)
        return u_patch, self._w["col"].sum(axis=0) + self._w["cls_fg"].sum(axis=0)


def synthetic_teacher(seed: int = 0, **kwargs) -> SyntheticTeacher:
    return SyntheticTeacher(seed=seed, **kwargs)


def content_key(array) -> str:
    """SHA-256 of an array's float32 C-order bytes; names cached feature files."""
    a = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    return hashlib.sha256(a.tobytes()).hexdigest()


def write_feature_cache(directory, items, features: TeacherFeatures) -> list[str]:
    """Write one ``<content_key>.npz`` per item (keys ``patch`` and ``cls``).

    ``index.json`` lists the keys in item order so a cache can be replayed
    without the original items.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    patch = features.patch.detach().cpu().numpy()
    cls = features.cls.detach().cpu().numpy()
    keys = []
    for i, item in enumerate(items):
        key = content_key(item.detach().cpu().numpy() if torch.is_tensor(item) else item)
        np.savez(directory / f"{key}.npz", patch=patch[i], cls=cls[i])
        keys.append(key)
    index = directory / "index.json"
    existing = json.loads(index.read_text())["keys"] if index.exists() else []
    index.write_text(json.dumps({"keys": existing + [k for k in keys if k not in existing]}, indent=1))
    return keys


def read_feature_cache(directory, keys: list[str] | None = None) -> TeacherFeatures:
    directory = Path(directory)
    if keys is None:
        keys = json.loads((directory / "index.json").read_text())["keys"]
    patch, cls = [], []
    for key in keys:
        path = directory / f"{key}.npz"
        if not path.exists():
            raise KeyError(f"no cached features for {key} in {directory}")
        with np.load(path) as f:
            patch.append(f["patch"])
            cls.append(f["cls"])
    return TeacherFeatures(torch.from_numpy(np.stack(patch)), torch.from_numpy(np.stack(cls)))


class CachedTeacher:
    """Teacher backed by precomputed per-image feature files keyed by content hash."""

    def __init__(self, directory, patch_size: int, feature_dim: int):
        self.directory = Path(directory)
        self.patch_size = int(patch_size)
        self.feature_dim = int(feature_dim)

    def extract(self, images: torch.Tensor) -> TeacherFeatures:
        keys = [content_key(img.detach().cpu().numpy()) for img in images]
        feats = read_feature_cache(self.directory, keys)
        return feats.to(dtype=images.dtype, device=images.device)


def make_mlp(d_in: int, d_out: int, hidden: int, depth: int) -> nn.Sequential:
    """``depth`` linear layers with GELU between them."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    dims = [d_in] + [hidden] * (depth - 1) + [d_out]
    layers: list[nn.Module] = []
    for i in range(depth):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < depth - 1:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class AlignHeads(nn.Module):
    """Token-wise patch head and pooled cls head mapping ``D`` to ``D'``."""

    def __init__(self, latent_dim: int, feature_dim: int, depth: int = 2, hidden: int | None = None):
        super().__init__()
        self.latent_dim = latent_dim
        self.feature_dim = feature_dim
        self.depth = depth
        self.hidden = hidden or max(feature_dim, 4 * latent_dim)
        self.mlp_patch = make_mlp(latent_dim, feature_dim, self.hidden, depth)
        self.mlp_cls = make_mlp(latent_dim, feature_dim, self.hidden, depth)

    def zero_init_final_layers(self) -> None:
        for mlp in (self.mlp_patch, self.mlp_cls):
            nn.init.zeros_(mlp[-1].weight)
            nn.init.zeros_(mlp[-1].bias)

    def forward(self, z):
        return project(self, z)


def project(heads: AlignHeads, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Patch projection of every token and cls projection of the average-pooled grid."""
    if z.ndim != 4 or z.shape[-1] != heads.latent_dim:
        raise ShapeError(f"expected (B, g_h, g_w, {heads.latent_dim}) latents, got {tuple(z.shape)}")
    return heads.mlp_patch(z), heads.mlp_cls(z.mean(dim=(1, 2)))


def cosine_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over tokens of ``1 - cos(a_i, b_i)``; ``b`` is treated as a constant.

    A zero-norm target token is an error rather than a silent zero. The norm
    product is floored at ``COS_EPS``, so an all-zero prediction yields a
    loss of 1 and an exact match yields 0.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    a = a.reshape(-1, a.shape[-1])
    b = b.detach().reshape(-1, b.shape[-1])
    b_norm = b.norm(dim=-1)
    if (b_norm == 0).any():
        raise ValueError("target contains a zero-norm feature vector")
    cos = (a * b).sum(-1) / (a.norm(dim=-1) * b_norm).clamp_min(COS_EPS)
    return (1.0 - cos).mean()


def smooth_mse_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise Huber with threshold 1: ``0.5 d^2`` inside, ``|d| - 0.5`` outside."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.smooth_l1_loss(a, b.detach(), beta=1.0)


def alignment_loss(proj: tuple[torch.Tensor, torch.Tensor], teacher: TeacherFeatures,
                   lambda1: float = 0.9, lambda2: float = 0.1, *, use_patch: bool = True,
                   use_cls: bool = True, normalize_teacher: bool = False) -> torch.Tensor:
    """``lambda1 * L_cos + lambda2 * L_smooth``, each averaged over the enabled patch/cls terms.

    ``normalize_teacher`` L2-normalises the teacher features (and the
    projections) before the smooth-MSE term.
    """
    patch_proj, cls_proj = proj
    if patch_proj.shape != teacher.patch.shape:
        raise ShapeError(f"projection grid {tuple(patch_proj.shape)} != teacher grid {tuple(teacher.patch.shape)}")
    if cls_proj.shape != teacher.cls.shape:
        raise ShapeError(f"cls projection {tuple(cls_proj.shape)} != teacher cls {tuple(teacher.cls.shape)}")
    pairs = []
    if use_patch:
        pairs.append((patch_proj, teacher.patch))
    if use_cls:
        pairs.append((cls_proj, teacher.cls))
    if not pairs:
        raise ValueError("at least one of use_patch / use_cls must be enabled")
    cos = sum(cosine_loss(a, b) for a, b in pairs) / len(pairs)
    if normalize_teacher:
        pairs = [(F.normalize(a, dim=-1), F.normalize(b, dim=-1)) for a, b in pairs]
    smooth = sum(smooth_mse_loss(a, b) for a, b in pairs) / len(pairs)
    return lambda1 * cos + lambda2 * smooth
