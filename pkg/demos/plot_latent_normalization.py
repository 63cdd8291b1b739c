"""
Matching a latent space to a reference range
============================================

A diffusion model trained on one VAE's latents expects values in that
VAE's range. Here we take the statistics of a narrow, well-regularised
latent space and map it affinely onto the much wider SD-VAE range, then
check the map is exactly invertible.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from reals.latent_ops import (NormMethod, appendix_ours_stats, latent_stats, normalize_decode, normalize_encode,
                              sd_vae_stats)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

# %%
# Published statistics: our aligned VAE and the SD-VAE reference.
ours, ref = appendix_ours_stats(), sd_vae_stats()
print("ours  mean %+.6f  min %+.6f  max %+.6f" % (ours.mean, ours.min, ours.max))
print("sd-vae mean %+.6f  min %+.6f  max %+.6f" % (ref.mean, ref.min, ref.max))

# %%
# The mean lands on the reference mean and the range is stretched by the
# ratio of the two spreads.
print("encode(ours.mean) =", normalize_encode(ours.mean, ours, ref))
print("scale factor      =", (ref.max - ref.min) / (ours.max - ours.min))

# %%
# Synthetic latents with roughly our spread, pushed through both methods.
# The std method needs a std for our side, so we measure one.
rng = np.random.default_rng(0)
z = np.clip(rng.normal(ours.mean, 1.0, 200_000), ours.min, ours.max)
measured = latent_stats(z)
fig, axes = plt.subplots(1, 3, figsize=(11, 3))
axes[0].hist(z, bins=200, color="C0")
axes[0].set_title("raw latents")
for ax, method in zip(axes[1:], (NormMethod.MAXMIN, NormMethod.STD)):
    zn = normalize_encode(z, measured, ref, method)
    ax.hist(zn, bins=200, color="C1")
    ax.set_title(f"{method.value}: mean {zn.mean():+.3f}, std {zn.std():.2f}")
    back = normalize_decode(zn, measured, ref, method)
    print(f"{method.value:6s} round trip max relative error {np.max(np.abs(back - z) / np.abs(z)):.2e}")
fig.tight_layout()
fig.savefig(out / "latent_normalization.png", dpi=100)
print("wrote", out / "latent_normalization.png")
