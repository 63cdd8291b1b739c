"""Parameter sweeps over VAE training (KL weight ladder, align depth, patch/cls terms)."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import RunConfig
from .data import ImageDataset, eval_corpus
from .diagnostics import clustering_report, semantic_consistency
from .train import encode_latents, load_vae, train_vae
from .latent_ops import load_norm_stats

log = logging.getLogger(__name__)

KL_LADDER = (0.0, 1e-6, 5e-6, 7.5e-6, 1e-5, 1.5e-5, 2e-5, 3e-5, 5e-5)


@dataclass
class SweepSpec:
    param: str  # "section.key", e.g. "loss.lambda_k"
    values: list
    base: RunConfig = field(default_factory=RunConfig)
    overrides: dict = field(default_factory=dict)  # value -> {"section.key": v}

    def __post_init__(self):
        if len(set(map(repr, self.values))) != len(self.values):
            raise ValueError(f"sweep values must be distinct: {self.values}")

    def config_for(self, value) -> RunConfig:
        cfg = self.base.with_overrides({self.param: value, **self.overrides.get(value, {})})
        return cfg


def _run_dir(root: Path, param: str, value) -> Path:
    return root / f"{param.replace('.', '_')}={value!r}"


def evaluate_vae(vae, cfg: RunConfig, corpus: ImageDataset | None = None) -> dict:
    """SC per augmentation and latent silhouette on the held-out corpus."""
    corpus = corpus if corpus is not None else eval_corpus(cfg)
    sc = semantic_consistency(vae, corpus.images, seed=cfg.eval.seed, sampled=cfg.eval.sampled,
                              pooling=cfg.eval.pooling, encoder_id=cfg.config_hash())
    z = encode_latents(vae, corpus.images, cfg.eval.seed, sampled=False)
    cluster = clustering_report(z, corpus.labels.numpy(), pool=cfg.eval.cluster_pool, tsne=False)
    return {"sc": sc.scores, "silhouette": cluster["silhouette"]}


def _completed(run_dir: Path, cfg: RunConfig) -> bool:
    stats = run_dir / "norm_stats.json"
    if not stats.exists():
        return False
    return load_norm_stats(stats)[3].get("config_hash") == cfg.config_hash()


def run_sweep(spec: SweepSpec, out_dir, dataset: ImageDataset | None = None, reuse: bool = True) -> dict:
    """Train one VAE per value and tabulate latent statistics, SC and silhouette.

    Each value runs in its own directory with its own seeds, so results do
    not depend on the order of ``values``. A directory holding a finished
    run with the same config hash is reused when ``reuse`` is set. Failures
    are recorded per value and do not stop the sweep.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in spec.values:
        cfg = spec.config_for(value)
        run_dir = _run_dir(root, spec.param, value)
        row = {"param": spec.param, "value": value, "config_hash": cfg.config_hash(), "run_dir": str(run_dir)}
        try:
            if reuse and _completed(run_dir, cfg):
                vae, _, _ = load_vae(run_dir / "vae")
                stats = load_norm_stats(run_dir / "norm_stats.json")[0]
            else:
                run = train_vae(cfg, run_dir, dataset=dataset)
                vae, stats = run.vae, run.stats
            with torch.no_grad():
                ev = evaluate_vae(vae, cfg)
            row.update(status="ok", mean=stats.mean, std=stats.std, min=stats.min, max=stats.max,
                       sample_count=stats.sample_count, silhouette=ev["silhouette"],
                       **{f"sc_{k}": v for k, v in ev["sc"].items()})
        except Exception as exc:  # isolate per-value failures
            log.error("sweep value %r failed: %s", value, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
        rows.append(row)
    report = {"param": spec.param, "values": list(spec.values), "rows": rows}
    (root / "sweep.json").write_text(json.dumps(report, indent=2, default=float))
    cols = ["value", "status", "mean", "std", "min", "max", "silhouette", "sc_Crop", "sc_Flip",
            "sc_GaussianBlur", "sc_Grayscale", "sc_All"]
    with open(root / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return report
