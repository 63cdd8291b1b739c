"""Shared fixtures: tiny configs for fast pipeline tests and the fixed-seed toy runs.

The toy runs (aligned pipeline via the CLI, an unaligned VAE and the KL
ladder) are session-scoped and shared by the acceptance module and the
slow unit tests that check trained-model properties. Set
``REALS_RUNS_DIR`` to keep them between sessions; finished runs with a
matching config hash are then reused.
"""

from __future__ import annotations

import os
import sys
import time
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from reals.alignment import AlignHeads, TeacherFeatures  # noqa: E402
from reals.cli import main as cli_main  # noqa: E402
from reals.config import save_config, toy_config  # noqa: E402
from reals.latent_ops import load_norm_stats  # noqa: E402
from reals.objectives import Discriminator, LossWeights, RandomConvFeatures  # noqa: E402
from reals.vae import VaeModel  # noqa: E402

ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}

KL_LADDER_ACCEPTANCE = (0.0, 1e-5, 1e-3)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{n:2d}] {name}: {detail}")


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory) -> Path:
    keep = os.environ.get("REALS_RUNS_DIR")
    if keep:
        root = Path(keep)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.mktemp("toy_runs")


def tiny_config(**overrides):
    """A few seconds of training on 64 images; for plumbing tests only."""
    base = dict(data__n_images=64, vae__widths=(8, 8, 8), optim__vae_steps=12, optim__vae_batch=8,
                optim__diffusion_steps=10, optim__diffusion_batch=16, norm__sample_count=96,
                eval__n_images=24, diffusion__width=32, diffusion__depth=1, sampler__steps=4,
                run__log_every=1, run__checkpoint_every=6, loss__gan_warmup=6)
    base.update(overrides)
    return toy_config(**base)


def tiny_objective_setup(dtype=torch.float64, lambda_a=1.0):
    """Float64 VAE, heads, discriminator and extractor small enough for finite differences."""
    torch.manual_seed(0)
    vae = VaeModel(p=4, latent_dim=4, widths=(8, 8)).to(dtype)
    heads = AlignHeads(4, 6).to(dtype)
    disc = Discriminator(width=4, warmup_steps=0).to(dtype)
    ext = RandomConvFeatures(0, widths=(4, 4)).to(dtype)
    gen = torch.Generator().manual_seed(1)
    images = (torch.rand(2, 3, 16, 16, generator=gen, dtype=dtype) * 2 - 1)
    teacher = TeacherFeatures(torch.randn(2, 4, 4, 6, generator=gen, dtype=dtype),
                              torch.randn(2, 6, generator=gen, dtype=dtype))
    noise = torch.randn(2, 4, 4, 4, generator=gen, dtype=dtype)
    return vae, heads, disc, ext, images, teacher, noise, LossWeights(lambda_a=lambda_a)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def _finished(run_dir: Path, marker: str, cfg) -> bool:
    stats = run_dir / "norm_stats.json"
    if not (run_dir / marker).exists() or not stats.exists():
        return False
    return load_norm_stats(stats)[3].get("config_hash") == cfg.config_hash()


def _cli(*argv):
    code = cli_main([str(a) for a in argv])
    assert code == 0, f"reals {' '.join(map(str, argv))} exited with {code}"


@pytest.fixture(scope="session")
def aligned_run(runs_root):
    """train-vae -> latent-stats -> train-diffusion -> sample -> decode -> eval-sc, all via the CLI."""
    cfg = toy_config(loss__lambda_a=1.0)
    out = runs_root / "aligned"
    out.mkdir(parents=True, exist_ok=True)
    ini = out / "toy.ini"
    save_config(cfg, ini)
    timings = {}
    if not _finished(out, "samples.json", cfg):
        common = ["--config", ini, "--out", out]
        steps = [
            ("train-vae", []),
            ("latent-stats", []),
            ("train-diffusion", ["--cache"]),
            ("sample", ["--steps", 50, "--last-step", 0.04, "--cfg-scale", 1.5, "--cfg-interval", 0, 0.75,
                        "--num-samples", 32 * cfg.data.n_classes]),
            ("decode", ["--latents", out / "latents.npz"]),
            ("eval-sc", ["--aug", "all"]),
        ]
        for name, extra in steps:
            t0 = time.perf_counter()
            _cli(name, *common, *extra)
            timings[name] = time.perf_counter() - t0
    return {"cfg": cfg, "out": out, "ini": ini, "timings": timings}


@pytest.fixture(scope="session")
def unaligned_run(runs_root):
    from reals.train import load_vae, train_vae

    cfg = toy_config(loss__lambda_a=0.0)
    out = runs_root / "unaligned"
    t0 = time.perf_counter()
    if not _finished(out, "vae/meta.json", cfg):
        train_vae(cfg, out)
    vae, heads, meta = load_vae(out / "vae")
    return {"cfg": cfg, "out": out, "vae": vae, "heads": heads, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def kl_sweep(runs_root):
    from reals.sweep import SweepSpec, run_sweep

    t0 = time.perf_counter()
    spec = SweepSpec("loss.lambda_k", list(KL_LADDER_ACCEPTANCE), base=toy_config(loss__lambda_a=1.0))
    report = run_sweep(spec, runs_root / "kl_sweep", reuse=True)
    return {"report": report, "seconds": time.perf_counter() - t0, "root": runs_root / "kl_sweep"}
