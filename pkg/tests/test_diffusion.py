import numpy as np
import pytest
import torch

from oracles import central_difference, relative_error
from reals.data import derive_seed
from reals.diffusion import (Denoiser, SamplerConfig, UnnormalizedLatentError, _guided_velocity, _sample_shard,
                             build_schedule, expected_normalized_moments, fm_training_loss, generate_images,
                             sample)
from reals.latent_ops import NormStats, sd_vae_stats
from reals.vae import ShapeError, VaeModel

SHAPE = (2, 2, 3)


@pytest.fixture
def denoiser():
    torch.manual_seed(0)
    return Denoiser(SHAPE, n_classes=3, width=16, depth=2).eval()


class ConditionalOnly:
    """Wraps a denoiser, refuses null-label calls, and has no null token of its own."""

    def __init__(self, model):
        self.model = model
        self.latent_shape = model.latent_shape

    def __call__(self, x, t, labels):
        assert not (labels == self.model.null_label).any()
        return self.model(x, t, labels)


class Recorder(torch.nn.Module):
    def __init__(self, fn, shape=SHAPE):
        super().__init__()
        self.fn, self.latent_shape, self.null_label, self.calls = fn, shape, 99, []

    def forward(self, x, t, labels):
        self.calls.append((x.clone(), t.clone(), labels.clone()))
        return self.fn(x, t, labels)


def test_schedule_examples():
    s = build_schedule(SamplerConfig(steps=250, last_step=0.04))
    sizes = s.sizes
    assert len(sizes) == 250
    assert abs(sizes.sum() - 1.0) < 1e-12
    assert sizes[-1] == pytest.approx(0.04, abs=1e-15)
    assert np.allclose(sizes[:-1], 0.96 / 249, rtol=0, atol=1e-15)
    assert np.allclose(build_schedule(SamplerConfig(steps=2, last_step=0.5)).sizes, [0.5, 0.5])


@pytest.mark.parametrize("steps,last", [(2, 0.9), (7, 0.01), (50, 0.04), (1000, 0.3), (3, 0.5)])
def test_schedule_sums_to_one(steps, last):
    s = build_schedule(SamplerConfig(steps=steps, last_step=last))
    assert abs(s.sizes.sum() - 1) < 1e-12 and s.sizes[-1] == pytest.approx(last, abs=1e-15)
    assert s.boundaries[0] == 0 and s.boundaries[-1] == 1 and np.all(np.diff(s.boundaries) > 0)


def test_schedule_errors():
    with pytest.raises(ValueError):
        build_schedule(SamplerConfig(steps=1, last_step=0.04))
    assert build_schedule(SamplerConfig(steps=1, last_step=1.0)).sizes.tolist() == [1.0]
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_interval=(0.8, 0.2))


def test_zero_velocity_returns_initial_noise():
    model = Recorder(lambda x, t, y: torch.zeros_like(x))
    cfg = SamplerConfig(steps=10, stochastic=False)
    out = sample(model, cfg, torch.zeros(5, dtype=torch.long), seed=4, dtype=torch.float64)
    init = torch.randn((5, *SHAPE), generator=torch.Generator().manual_seed(derive_seed(4, 0)), dtype=torch.float64)
    assert torch.equal(out, init)


def test_constant_velocity_closed_form():
    c = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    model = Recorder(lambda x, t, y: c.expand_as(x))
    out = sample(model, SamplerConfig(steps=37, last_step=0.04, stochastic=False), torch.zeros(3, dtype=torch.long),
                 seed=1, dtype=torch.float64)
    init = sample(Recorder(lambda x, t, y: torch.zeros_like(x)), SamplerConfig(steps=2, stochastic=False),
                  torch.zeros(3, dtype=torch.long), seed=1, dtype=torch.float64)
    assert torch.allclose(out, init - c, rtol=0, atol=1e-12)


def test_sampler_integrates_from_one_to_zero():
    model = Recorder(lambda x, t, y: torch.zeros_like(x))
    sample(model, SamplerConfig(steps=5, last_step=0.1, stochastic=False), torch.zeros(1, dtype=torch.long))
    ts = [float(t[0]) for _, t, _ in model.calls]
    assert ts[0] == 1.0 and ts == sorted(ts, reverse=True) and ts[-1] == pytest.approx(0.1)


@pytest.mark.parametrize("stochastic", [False, True])
def test_unit_guidance_is_bitwise_conditional(denoiser, stochastic):
    labels = torch.tensor([0, 1, 2, 1])
    base = SamplerConfig(steps=20, stochastic=stochastic)
    cond = sample(ConditionalOnly(denoiser), base, labels, seed=3)
    w1 = sample(denoiser, SamplerConfig(steps=20, stochastic=stochastic, guidance_scale=1.0), labels, seed=3)
    empty = sample(denoiser, SamplerConfig(steps=20, stochastic=stochastic, guidance_scale=4.0,
                                           guidance_interval=(0.0, 0.0)), labels, seed=3)
    guided = sample(denoiser, SamplerConfig(steps=20, stochastic=stochastic, guidance_scale=4.0), labels, seed=3)
    assert torch.equal(cond, w1)
    assert torch.equal(cond, empty)
    assert not torch.equal(cond, guided)


def test_guidance_only_inside_interval():
    def fn(x, t, y):
        return torch.where((y == 99).view(-1, 1, 1, 1), torch.zeros_like(x), torch.ones_like(x))

    model = Recorder(fn)
    cfg = SamplerConfig(steps=10, last_step=0.1, guidance_scale=3.0, guidance_interval=(0.0, 0.5))
    x = torch.zeros(2, *SHAPE)
    lab, null = torch.zeros(2, dtype=torch.long), torch.full((2,), 99)
    assert torch.equal(_guided_velocity(model, x, 0.7, lab, null, cfg), torch.ones_like(x))
    assert len(model.calls) == 1
    assert torch.equal(_guided_velocity(model, x, 0.5, lab, null, cfg), torch.full_like(x, 3.0))
    assert len(model.calls) == 3


def test_sampling_is_seed_reproducible_and_shard_independent(denoiser):
    labels = torch.arange(150) % 3
    cfg = SamplerConfig(steps=8)
    a = sample(denoiser, cfg, labels, seed=11)
    b = sample(denoiser, cfg, labels, seed=11)
    assert torch.equal(a, b)
    assert not torch.equal(a, sample(denoiser, cfg, labels, seed=12))
    sched = build_schedule(cfg)
    shards = {k: _sample_shard(denoiser, cfg, sched, labels[s:s + 64], torch.full((len(labels[s:s + 64]),), 3),
                               SHAPE, 11, k, torch.float32)
              for k, s in reversed(list(enumerate(range(0, 150, 64))))}
    assert torch.equal(torch.cat([shards[k] for k in sorted(shards)]), a)


def test_fm_loss_examples():
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(6, *SHAPE, generator=gen, dtype=torch.float64)
    labels = torch.zeros(6, dtype=torch.long)
    exact = Recorder(lambda x, t, y: (x - z0) / t.view(-1, 1, 1, 1))
    loss = fm_training_loss(exact, z0, labels, torch.Generator().manual_seed(1), cfg_dropout=0.0)
    assert loss.item() < 1e-20
    zero = Recorder(lambda x, t, y: torch.zeros_like(x))
    loss = fm_training_loss(zero, z0, labels, torch.Generator().manual_seed(1), cfg_dropout=0.0)
    x_t, t, _ = zero.calls[0]
    target = (x_t - z0) / t.view(-1, 1, 1, 1)
    assert loss.item() == pytest.approx(target.pow(2).mean().item(), rel=1e-10)


def test_fm_loss_monte_carlo_constant_model():
    c = 0.7
    z0 = torch.zeros(10 ** 6, 1, 1, 1, dtype=torch.float64)
    model = Recorder(lambda x, t, y: torch.full_like(x, c), shape=(1, 1, 1))
    loss = fm_training_loss(model, z0, torch.zeros(len(z0), dtype=torch.long), torch.Generator().manual_seed(0),
                            cfg_dropout=0.0)
    assert relative_error(loss.item(), 1 + c ** 2) < 0.01


def test_fm_loss_label_dropout_rate():
    model = Recorder(lambda x, t, y: torch.zeros_like(x), shape=(1, 1, 1))
    fm_training_loss(model, torch.zeros(20000, 1, 1, 1), torch.zeros(20000, dtype=torch.long),
                     torch.Generator().manual_seed(0), cfg_dropout=0.1)
    dropped = (model.calls[0][2] == 99).double().mean().item()
    assert abs(dropped - 0.1) < 0.01


def test_fm_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = Denoiser(SHAPE, 3, width=8, depth=1).double()
    z0 = torch.randn(4, *SHAPE, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 0])
    f = lambda: fm_training_loss(model, z0, labels, torch.Generator().manual_seed(5))  # noqa: E731
    f().backward()
    rng = np.random.default_rng(0)
    for name, p in model.named_parameters():
        for i in rng.choice(p.numel(), size=min(p.numel(), 8), replace=False):
            num = central_difference(f, p, int(i), 1e-6)
            assert relative_error(p.grad.view(-1)[i].item(), num, floor=1e-7) < 1e-4, name


def test_unnormalized_guard():
    ours = NormStats(0.0, 2.0, -8.0, 9.0, 100)
    expected = expected_normalized_moments(ours, sd_vae_stats(), "maxmin", 0.18215)
    model = Recorder(lambda x, t, y: torch.zeros_like(x))
    raw = torch.randn(64, *SHAPE, generator=torch.Generator().manual_seed(0)) * 2.0
    assert expected[1] == pytest.approx(2.0 * 134.048172 / 17.0 * 0.18215)
    labels = torch.zeros(64, dtype=torch.long)
    for bad in (raw * 40, raw + 60, raw * 0.01):
        with pytest.raises(UnnormalizedLatentError):
            fm_training_loss(model, bad, labels, torch.Generator(), expected=expected)
    ok = raw * (expected[1] / 2.0) + expected[0]
    fm_training_loss(model, ok, labels, torch.Generator(), expected=expected)


def test_denoiser_shape_check(denoiser):
    with pytest.raises(ShapeError):
        denoiser(torch.zeros(1, 2, 2, 4), torch.zeros(1), torch.zeros(1, dtype=torch.long))
    out = denoiser(torch.zeros(3, *SHAPE), torch.rand(3), torch.tensor([0, 1, 3]))
    assert out.shape == (3, *SHAPE)


def test_generate_images_shapes_and_determinism():
    torch.manual_seed(0)
    vae = VaeModel(8, 4, (8, 8, 8)).eval()
    model = Denoiser((4, 4, 4), 2, width=16, depth=1).eval()
    ours = NormStats(0.0, 1.0, -4.0, 4.0, 10)
    cfg = SamplerConfig(steps=5)
    imgs, z, meta = generate_images(vae, ours, sd_vae_stats(), "maxmin", model, cfg, torch.tensor([0, 1, 0, 1]), 7)
    assert imgs.shape == (4, 3, 32, 32) and z.shape == (4, 4, 4, 4)
    again, _, meta2 = generate_images(vae, ours, sd_vae_stats(), "maxmin", model, cfg, torch.tensor([0, 1, 0, 1]), 7)
    assert torch.equal(imgs, again) and meta == meta2
    assert {"vae_hash", "denoiser_hash", "norm_stats", "sampler", "seed"} <= set(meta)
    with pytest.raises(ShapeError):
        generate_images(VaeModel(8, 3, (8, 8, 8)), ours, sd_vae_stats(), "maxmin", model, cfg, torch.tensor([0]), 0)
