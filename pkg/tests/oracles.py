"""Independent reference computations used by the tests.

Nothing here imports the package under test; each oracle recomputes a
quantity by a different route (sampling, brute force, a different
factorisation) so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import torch


def kl_monte_carlo(mu: np.ndarray, logvar: np.ndarray, n: int, rng: np.random.Generator) -> float:
    """E_q[log q(z) - log p(z)] for a diagonal Gaussian q against N(0, I), by sampling."""
    std = np.exp(0.5 * logvar)
    eps = rng.standard_normal((n, mu.size))
    z = mu.ravel() + std.ravel() * eps
    log_q = -0.5 * (eps ** 2 + logvar.ravel() + np.log(2 * np.pi)).sum(axis=1)
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi)).sum(axis=1)
    return float(np.mean(log_q - log_p))


def frechet_sqrtm(mu1, cov1, mu2, cov2) -> float:
    """Fréchet distance with scipy's Schur-based matrix square root of ``cov1 @ cov2``."""
    covmean = scipy.linalg.sqrtm(cov1 @ cov2)
    covmean = np.real(covmean)
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(covmean))


def frechet_eig(mu1, cov1, mu2, cov2) -> float:
    """Fréchet distance from the eigenvalues of ``cov1 @ cov2`` (real, non-negative for SPD pairs)."""
    eig = np.linalg.eigvals(cov1 @ cov2)
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.sqrt(np.clip(eig.real, 0, None)).sum())


def silhouette_brute(X: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette by explicit double loop over points."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(X)
    scores = []
    for i in range(n):
        d = np.sqrt(((X - X[i]) ** 2).sum(axis=1))
        same = labels == labels[i]
        if same.sum() <= 1:
            scores.append(0.0)
            continue
        a = d[same].sum() / (same.sum() - 1)
        b = min(d[labels == c].mean() for c in np.unique(labels) if c != labels[i])
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(scores))


def central_difference(f, params, index, h: float) -> float:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for one entry of a flat float64 tensor."""
    flat = params.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        flat[index] = orig + h
        up = float(f())
        flat[index] = orig - h
        down = float(f())
    flat[index] = orig
    return (up - down) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
