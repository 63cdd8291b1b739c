"""Image datasets: the deterministic synthetic-shapes generator and an image-folder loader."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, -0.65, -0.65),
    "green": (-0.65, 0.8, -0.6),
    "blue": (-0.65, -0.55, 0.85),
}


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of printable parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def torch_generator(*parts) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*parts))


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    labels: torch.Tensor  # (N,)
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_mean_colors(self) -> torch.Tensor:
        """Mean RGB over all pixels of each class, ``(n_classes, 3)``."""
        means = self.images.mean(dim=(2, 3))
        return torch.stack([means[self.labels == c].mean(0) for c in range(self.n_classes)])

    def subset(self, idx) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx], self.class_names)


def class_table(n_classes: int) -> list[tuple[str, str]]:
    """(shape, colour) for each class; the first 9 cycle through every pairing."""
    if not 2 <= n_classes <= 9:
        raise ValueError("synthetic shapes supports 2 to 9 classes")
    names = list(COLORS)
    return [(SHAPES[i % 3], names[(i + i // 3) % 3]) for i in range(n_classes)]


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(yy - cy) <= 0.85 * r) & (np.abs(xx - cx) <= 0.85 * r)
    # upward triangle with apex at cy - r and base at cy + r
    rel = (yy - (cy - r)) / (2 * r)
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * r * 1.1)


def render_shape_image(rng: np.random.Generator, size: int, shape: str, color: str) -> np.ndarray:
    """One ``(3, size, size)`` float32 image: textured background plus a coloured shape."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.full((size, size), rng.uniform(-0.35, -0.05))
    for _ in range(3):
        fy, fx = rng.uniform(1.0, 4.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        bg += 0.08 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    img = np.repeat(bg[None], 3, axis=0) + rng.uniform(-0.05, 0.05, (3, 1, 1))
    img += 0.04 * rng.standard_normal((3, size, size))
    r = rng.uniform(0.25, 0.36) * size
    cy, cx = rng.uniform(r, size - r, 2)
    mask = _shape_mask(shape, size, cy, cx, r)
    rgb = np.asarray(COLORS[color]) + rng.uniform(-0.08, 0.08, 3)
    img = np.where(mask[None], rgb[:, None, None] + 0.03 * rng.standard_normal((3, size, size)), img)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def synthetic_shapes(n_images: int = 2000, image_size: int = 32, n_classes: int = 6, seed: int = 0) -> ImageDataset:
    """Class-balanced coloured shapes; image ``i`` depends only on ``(seed, i)``."""
    table = class_table(n_classes)
    imgs = np.empty((n_images, 3, image_size, image_size), dtype=np.float32)
    labels = np.arange(n_images) % n_classes
    for i in range(n_images):
        rng = np.random.default_rng([int(seed), i])
        shape, color = table[labels[i]]
        imgs[i] = render_shape_image(rng, image_size, shape, color)
    names = [f"{color}_{shape}" for shape, color in table]
    return ImageDataset(torch.from_numpy(imgs), torch.from_numpy(labels.astype(np.int64)), names)


def load_image_folder(path, image_size: int) -> ImageDataset:
    """Class-per-subdirectory folder of images, resized to ``image_size`` and scaled to [-1, 1]."""
    from PIL import Image

    root = Path(path)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class subdirectories in {root}")
    imgs, labels = [], []
    for c, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".webp"):
                continue
            im = Image.open(f).convert("RGB").resize((image_size, image_size), Image.BICUBIC)
            imgs.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0)
            labels.append(c)
    return ImageDataset(torch.from_numpy(np.stack(imgs)), torch.tensor(labels), classes)


def load_dataset(cfg) -> ImageDataset:
    d = cfg.data
    if d.kind == "synthetic":
        return synthetic_shapes(d.n_images, d.image_size, d.n_classes, d.seed)
    if d.kind == "folder":
        return load_image_folder(d.path, d.image_size)
    raise ValueError(f"unknown dataset kind {d.kind!r}")


def eval_corpus(cfg) -> ImageDataset:
    """Held-out evaluation images: a fresh synthetic draw, or the first images of a folder dataset."""
    d = cfg.data
    if d.kind == "synthetic":
        return synthetic_shapes(cfg.eval.n_images, d.image_size, d.n_classes, derive_seed(d.seed, "eval", cfg.eval.seed) % (2 ** 31))
    return load_dataset(cfg).subset(slice(0, cfg.eval.n_images))


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``(B, 3, H, W)`` in [-1, 1] to ``(B, H, W, 3)`` uint8."""
    x = ((images.detach().cpu().clamp(-1, 1) + 1) * 127.5).round()
    return x.permute(0, 2, 3, 1).numpy().astype(np.uint8)
