"""Command-line entry point: ``reals <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (INI, see :mod:`reals.config`),
``--seed`` and ``--out DIR``, plus ``--set section.key=value`` overrides.
Exit status is 0 on success, 1 for usage errors and 2 when the command
itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("reals")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

AUG_NAMES = {"crop": "Crop", "flip": "Flip", "gaussianblur": "GaussianBlur", "blur": "GaussianBlur",
             "grayscale": "Grayscale", "composite": "All"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- shared helpers ------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["run.out_dir"] = args.out
    return cfg.with_overrides(overrides) if overrides else cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.run.seed, **extra}


def _dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, default=float))
    print(path)


def _vae_dir(args, cfg) -> Path:
    return Path(args.vae) if args.vae else Path(cfg.run.out_dir) / "vae"


def _stats_path(args, cfg) -> Path:
    return Path(args.stats) if args.stats else Path(cfg.run.out_dir) / "norm_stats.json"


def _write_pngs(directory: Path, images: torch.Tensor, labels, meta: dict, prefix: str = "sample") -> list[Path]:
    from PIL import Image, PngImagePlugin

    from .data import to_uint8

    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (arr, lab) in enumerate(zip(to_uint8(images), labels)):
        info = PngImagePlugin.PngInfo()
        for key, value in {**meta, "label": int(lab), "index": k}.items():
            info.add_text(key, value if isinstance(value, str) else json.dumps(value, default=float))
        path = directory / f"{prefix}_{k:05d}_class{int(lab)}.png"
        Image.fromarray(arr).save(path, pnginfo=info)
        paths.append(path)
    return paths


def _parse_labels(text: str | None, n: int, n_classes: int) -> torch.Tensor:
    if not text:
        return torch.arange(n) % n_classes
    labels = [int(v) for v in text.split(",") if v.strip()]
    if any(not 0 <= v < n_classes for v in labels):
        raise UsageError(f"labels must lie in [0, {n_classes})")
    return torch.tensor(labels * (n // len(labels)) + labels[: n % len(labels)])


# -- subcommands ---------------------------------------------------------------

def cmd_train_vae(args, cfg):
    from .train import train_vae

    if args.steps is not None:
        cfg = cfg.with_overrides({"optim.vae_steps": args.steps})
    run = train_vae(cfg, _out(cfg), resume=args.resume)
    summary = _provenance(cfg, train_recon=run.train_recon, checkpoint=str(run.out_dir / "vae"),
                          norm_stats=run.stats.to_dict() if run.stats else None)
    _dump(run.out_dir / "train_vae.json", summary)


def cmd_latent_stats(args, cfg):
    from .data import load_dataset
    from .diffusion import state_hash
    from .latent_ops import save_norm_stats
    from .train import compute_norm_stats, load_vae, reference_stats

    out = _out(cfg)
    vae, _, _ = load_vae(_vae_dir(args, cfg))
    count = args.num or cfg.norm.sample_count
    method = args.method or cfg.norm.method
    stats = compute_norm_stats(vae, load_dataset(cfg), count, cfg.run.seed)
    path = Path(args.stats_out) if args.stats_out else out / "norm_stats.json"
    save_norm_stats(path, stats, reference_stats(cfg), method, **_provenance(cfg, vae_hash=state_hash(vae)))
    print(json.dumps(stats.to_dict()))
    print(path)


def cmd_train_diffusion(args, cfg):
    from .train import train_diffusion

    if args.steps is not None:
        cfg = cfg.with_overrides({"optim.diffusion_steps": args.steps})
    run = train_diffusion(cfg, _out(cfg), vae_dir=_vae_dir(args, cfg), stats_path=_stats_path(args, cfg),
                          cache=args.cache)
    losses = run.losses
    head = float(np.mean(losses[: max(1, len(losses) // 20)]))
    tail = float(np.mean(losses[-max(1, len(losses) // 20):]))
    _dump(run.out_dir / "train_diffusion.json",
          _provenance(cfg, steps=len(losses), fm_loss_start=head, fm_loss_end=tail,
                      checkpoint=str(run.out_dir / "diffusion")))


def _sampler_config(args, cfg):
    from .diffusion import SamplerConfig

    s = cfg.sampler
    interval = tuple(args.cfg_interval) if args.cfg_interval else tuple(s.cfg_interval)
    return SamplerConfig(steps=args.steps or s.steps,
                         last_step=args.last_step if args.last_step is not None else s.last_step,
                         guidance_scale=args.cfg_scale if args.cfg_scale is not None else s.cfg_scale,
                         guidance_interval=interval,
                         stochastic=s.stochastic and not args.ode, noise_scale=s.noise_scale)


def cmd_sample(args, cfg):
    from .diffusion import generate_images
    from .latent_ops import load_norm_stats
    from .train import load_denoiser, load_vae

    out = _out(cfg)
    sampler = _sampler_config(args, cfg)
    model, dmeta = load_denoiser(Path(args.diffusion) if args.diffusion else out / "diffusion")
    vae, _, _ = load_vae(_vae_dir(args, cfg))
    ours, ref, method, _ = load_norm_stats(_stats_path(args, cfg))
    labels = _parse_labels(args.labels, args.num_samples, model.n_classes)
    images, z, meta = generate_images(vae, ours, ref, method, model, sampler, labels, seed=cfg.run.seed,
                                      latent_scale=dmeta.get("latent_scale", cfg.diffusion.latent_scale))
    meta = {**meta, **_provenance(cfg)}
    np.savez(out / "latents.npz", latents=z.numpy(), labels=labels.numpy(), meta=json.dumps(meta, default=float))
    paths = _write_pngs(out / "samples", images, labels.tolist(), {"config_hash": meta["config_hash"],
                                                                   "seed": str(cfg.run.seed)})
    _dump(out / "samples.json", {**meta, "images": [str(p) for p in paths], "labels": labels.tolist()})


def _read_latents(path) -> tuple[torch.Tensor, np.ndarray]:
    with np.load(path) as f:
        z = torch.from_numpy(f["latents"])
        labels = f["labels"] if "labels" in f.files else np.zeros(len(z), dtype=np.int64)
    return z, labels


def cmd_decode(args, cfg):
    from .train import load_vae
    from .vae import decode

    out = _out(cfg)
    vae, _, _ = load_vae(_vae_dir(args, cfg))
    z, labels = _read_latents(args.latents)
    with torch.no_grad():
        images = decode(vae, z.to(next(vae.parameters()).dtype), clamp=True)
    paths = _write_pngs(out / "decoded", images, labels.tolist(),
                        {"config_hash": cfg.config_hash(), "seed": str(cfg.run.seed), "source": str(args.latents)},
                        prefix="decoded")
    _dump(out / "decode.json", _provenance(cfg, source=str(args.latents), images=[str(p) for p in paths]))


def cmd_eval_sc(args, cfg):
    from .data import eval_corpus
    from .diagnostics import SC_COLUMNS, sc_fixture_comparison, semantic_consistency, standard_augmentations
    from .train import load_vae

    out = _out(cfg)
    vae, _, _ = load_vae(_vae_dir(args, cfg))
    augs = standard_augmentations()
    if args.aug != "all":
        name = AUG_NAMES.get(args.aug.lower())
        if name is None:
            raise UsageError(f"unknown augmentation {args.aug!r}; choose from all, {', '.join(AUG_NAMES)}")
        augs = {name: augs[name]}
    corpus = eval_corpus(cfg)
    report = semantic_consistency(vae, corpus.images, augs, seed=cfg.eval.seed, sampled=cfg.eval.sampled,
                                  pooling=cfg.eval.pooling, encoder_id=cfg.config_hash())
    payload = {**report.to_dict(), **_provenance(cfg), "augmentations": {k: v.describe() for k, v in augs.items()},
               "pooling": cfg.eval.pooling, "sampled": cfg.eval.sampled,
               "fixture_comparison": sc_fixture_comparison(report)}
    _dump(out / "sc_report.json", payload)
    with open(out / "sc_report.csv", "w") as f:
        f.write("augmentation,sc\n")
        for name in [c for c in SC_COLUMNS if c in report.scores]:
            f.write(f"{name},{report.scores[name]:.6f}\n")


def cmd_normalize(args, cfg):
    from .latent_ops import NormMethod, load_norm_stats, normalize_decode, normalize_encode

    ours, ref, stored, _ = load_norm_stats(args.stats)
    method = NormMethod.parse(args.method) if args.method else stored
    z = np.fromfile(args.input, dtype="<f8")
    fn = normalize_decode if args.inverse else normalize_encode
    fn(z, ours, ref, method).astype("<f8").tofile(args.output)
    print(args.output)


def cmd_diagnose(args, cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import eval_corpus
    from .diagnostics import attention_map, clustering_report, write_tsne_csv
    from .train import encode_latents, load_vae

    out = _out(cfg)
    vae, _, _ = load_vae(_vae_dir(args, cfg))
    corpus = eval_corpus(cfg)
    z = encode_latents(vae, corpus.images, cfg.eval.seed, sampled=cfg.eval.sampled)
    if args.kind == "attention":
        i, j = args.token
        n = min(args.num_images, len(z))
        maps = np.stack([attention_map(z[k], i, j) for k in range(n)])
        np.save(out / "attention_maps.npy", maps)
        fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
        for k in range(n):
            axes[0, k].imshow((corpus.images[k].permute(1, 2, 0).numpy() + 1) / 2)
            axes[1, k].imshow(maps[k], vmin=0, vmax=1, cmap="viridis")
            axes[1, k].plot(j, i, "r+")
            for ax in axes[:, k]:
                ax.axis("off")
        fig.suptitle(f"token ({i}, {j})  config {cfg.config_hash()}", fontsize=8)
        fig.savefig(out / "attention.png", dpi=100, metadata={"Comment": cfg.config_hash()})
        plt.close(fig)
        _dump(out / "attention.json", _provenance(cfg, token=[i, j], maps=maps.tolist()))
        return
    rep = clustering_report(z, corpus.labels.numpy(), pool=cfg.eval.cluster_pool, tsne=args.kind == "tsne",
                            perplexity=cfg.eval.perplexity, seed=cfg.eval.seed)
    if args.kind == "tsne":
        write_tsne_csv(out / "tsne.csv", rep["tsne_export"])
        pts = np.asarray(rep["tsne_export"])
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for c in np.unique(pts[:, 2]):
            sel = pts[:, 2] == c
            ax.scatter(pts[sel, 0], pts[sel, 1], s=6, label=corpus.class_names[int(c)])
        ax.legend(fontsize=6, markerscale=2)
        ax.set_title(f"silhouette {rep['silhouette']:.3f}", fontsize=9)
        fig.savefig(out / "tsne.png", dpi=100, metadata={"Comment": cfg.config_hash()})
        plt.close(fig)
    _dump(out / "cluster.json", _provenance(cfg, silhouette=rep["silhouette"], pool=rep["pool"], n=rep["n"]))


def cmd_sweep(args, cfg):
    from .sweep import SweepSpec, run_sweep

    values = [float(v) if args.param.startswith(("loss.", "optim.")) else v for v in args.values.split(",")]
    report = run_sweep(SweepSpec(args.param, values, base=cfg), _out(cfg), reuse=not args.no_reuse)
    failed = [r["value"] for r in report["rows"] if r["status"] != "ok"]
    print(json.dumps([{k: r.get(k) for k in ("value", "status", "std", "silhouette", "sc_All")}
                      for r in report["rows"]], default=float))
    if failed:
        raise RuntimeError(f"sweep values failed: {failed}")


def cmd_export_features(args, cfg):
    from .diagnostics import export_semantic_features, extract_semantic_features
    from .train import load_vae

    out = _out(cfg)
    _, heads, _ = load_vae(_vae_dir(args, cfg))
    z, labels = _read_latents(args.latents)
    with torch.no_grad():
        feats = extract_semantic_features(heads, z.to(next(heads.parameters()).dtype))
    keys = export_semantic_features(out / "features", z, feats)
    _dump(out / "features.json", _provenance(cfg, source=str(args.latents), keys=keys, labels=labels.tolist()))


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", help="output directory (overrides run.out_dir)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="reals", description="Representation-aligned latent space toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("train-vae", cmd_train_vae, "train the aligned VAE and compute latent statistics")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true")

    p = add("latent-stats", cmd_latent_stats, "recompute NormStats from a VAE checkpoint")
    p.add_argument("--vae")
    p.add_argument("--num", type=int, help="number of latents (default norm.sample_count)")
    p.add_argument("--method", choices=["maxmin", "std"])
    p.add_argument("--stats-out")

    p = add("train-diffusion", cmd_train_diffusion, "train the latent denoiser")
    p.add_argument("--vae")
    p.add_argument("--stats")
    p.add_argument("--steps", type=int)
    p.add_argument("--cache", action="store_true", help="reuse encoded latents from <out>/latent_cache.npz")

    p = add("sample", cmd_sample, "sample latents and decode them to PNGs")
    p.add_argument("--diffusion")
    p.add_argument("--vae")
    p.add_argument("--stats")
    p.add_argument("--steps", type=int)
    p.add_argument("--last-step", type=float)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--cfg-interval", type=float, nargs=2, metavar=("A", "B"))
    p.add_argument("--num-samples", type=int, default=16)
    p.add_argument("--labels", help="comma-separated class ids, repeated to fill --num-samples")
    p.add_argument("--ode", action="store_true", help="deterministic Euler steps (no injected noise)")

    p = add("decode", cmd_decode, "decode a latent archive to PNGs")
    p.add_argument("--latents", required=True)
    p.add_argument("--vae")

    p = add("eval-sc", cmd_eval_sc, "semantic consistency of a VAE checkpoint")
    p.add_argument("--vae")
    p.add_argument("--aug", default="all", help="all | crop | flip | gaussianblur | grayscale | composite")

    p = add("normalize", cmd_normalize, "apply latent normalization to a raw float64 file")
    p.add_argument("--stats", required=True)
    p.add_argument("--method", choices=["maxmin", "std"])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--inverse", action="store_true")
    # --out names the output file here rather than a directory
    p.set_defaults(file_out=True)

    p = add("diagnose", cmd_diagnose, "attention maps, t-SNE export or clustering score")
    p.add_argument("kind", choices=["attention", "tsne", "cluster"])
    p.add_argument("--vae")
    p.add_argument("--token", type=int, nargs=2, default=(1, 1), metavar=("I", "J"))
    p.add_argument("--num-images", type=int, default=8)

    p = add("sweep", cmd_sweep, "train one VAE per parameter value")
    p.add_argument("--param", default="loss.lambda_k")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--no-reuse", action="store_true")

    p = add("export-features", cmd_export_features, "semantic features of latents in the cached-teacher format")
    p.add_argument("--latents", required=True)
    p.add_argument("--vae")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "file_out", False):
            if not args.out:
                raise UsageError("normalize needs --out FILE")
            args.output, args.out = args.out, None
        cfg = _config(args)
        args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"reals {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # reported, not re-raised: the exit code carries the failure
        log.debug("command failed", exc_info=True)
        print(f"reals {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
