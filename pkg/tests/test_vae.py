import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import central_difference, kl_monte_carlo, relative_error
from reals.vae import (GaussianPosterior, NonFiniteError, ShapeError, VaeModel, decode, encode,
                       kl_to_standard_normal, reparameterize)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return VaeModel(p=8, latent_dim=4, widths=(8, 8, 8))


def test_encode_shapes(model):
    post = encode(model, torch.zeros(2, 3, 32, 32))
    assert post.mu.shape == (2, 4, 4, 4)
    assert post.logvar.shape == (2, 4, 4, 4)


@pytest.mark.parametrize("p,h,w", [(4, 16, 24), (8, 32, 16), (8, 64, 64), (4, 8, 8)])
def test_roundtrip_preserves_spatial_dims(p, h, w):
    torch.manual_seed(1)
    vae = VaeModel(p=p, latent_dim=3, widths=(8, 8, 8))
    x = torch.rand(1, 3, h, w) * 2 - 1
    post = encode(vae, x)
    assert post.shape == (1, h // p, w // p, 3)
    assert decode(vae, post.mu).shape == x.shape


def test_encode_rejects_bad_inputs(model):
    with pytest.raises(ShapeError):
        encode(model, torch.zeros(1, 3, 30, 32))
    with pytest.raises(ShapeError):
        encode(model, torch.zeros(1, 1, 32, 32))
    x = torch.zeros(1, 3, 32, 32)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        encode(model, x)


def test_invalid_downsampling_factor():
    with pytest.raises(ValueError):
        VaeModel(p=16)


def test_zero_init_gives_zero_posterior_and_output(model):
    model.zero_init_final_layers()
    post = encode(model, torch.rand(2, 3, 32, 32))
    assert torch.count_nonzero(post.mu) == 0 and torch.count_nonzero(post.logvar) == 0
    assert torch.count_nonzero(decode(model, torch.randn(2, 4, 4, 4))) == 0


def test_encode_is_deterministic(model):
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    a, b = encode(model, x), encode(model, x)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.logvar, b.logvar)


def test_logvar_clamped():
    torch.manual_seed(0)
    vae = VaeModel(p=4, latent_dim=2, widths=(8, 8))
    with torch.no_grad():
        vae.encoder.conv_out.bias[2:] = 1e3
    assert encode(vae, torch.zeros(1, 3, 8, 8)).logvar.max() == 20.0


def test_decode_clamps_only_at_inference(model):
    with torch.no_grad():
        model.decoder.conv_out.bias.fill_(5.0)
    z = torch.zeros(1, 4, 4, 4)
    assert decode(model, z).max() <= 1.0
    assert decode(model, z, clamp=False).min() > 1.0


def test_decode_channel_mismatch(model):
    with pytest.raises(ShapeError):
        decode(model, torch.zeros(1, 4, 4, 3))


def test_reparameterize_examples():
    post = GaussianPosterior(torch.full((1,), 0.5), torch.full((1,), 2 * math.log(2)))
    assert reparameterize(post, torch.ones(1)).item() == pytest.approx(2.5, abs=1e-7)
    mu = torch.randn(2, 3, 3, 4)
    post = GaussianPosterior(mu, torch.randn(2, 3, 3, 4))
    assert torch.equal(reparameterize(post, torch.zeros_like(mu)), mu)
    with pytest.raises(ShapeError):
        reparameterize(post, torch.zeros(2, 3, 3, 3))


def test_reparameterize_distribution():
    gen = torch.Generator().manual_seed(0)
    n = 10 ** 6
    post = GaussianPosterior(torch.zeros(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64))
    z = reparameterize(post, torch.randn(n, generator=gen, dtype=torch.float64))
    assert abs(z.mean().item()) < 0.01
    assert abs(z.std().item() - 1) < 0.01


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_reparameterize_is_affine_in_noise(seed):
    gen = torch.Generator().manual_seed(seed)
    mu, lv, n = (torch.randn(2, 2, 2, 3, generator=gen, dtype=torch.float64) for _ in range(3))
    post = GaussianPosterior(mu, lv)
    diff = reparameterize(post, n) - reparameterize(post, torch.zeros_like(n))
    assert torch.allclose(diff, torch.exp(0.5 * lv) * n, rtol=0, atol=1e-14)


def test_kl_examples():
    assert kl_to_standard_normal(GaussianPosterior(torch.zeros(3, 2), torch.zeros(3, 2))).item() == 0.0
    one = GaussianPosterior(torch.ones(1, 1), torch.zeros(1, 1))
    assert kl_to_standard_normal(one).item() == pytest.approx(0.5)


def test_kl_sums_over_dims_and_averages_over_batch():
    mu = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    post = GaussianPosterior(mu, torch.zeros_like(mu))
    assert kl_to_standard_normal(post).item() == pytest.approx(0.25)


def test_kl_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        kl_to_standard_normal(GaussianPosterior(torch.tensor([float("inf")]), torch.zeros(1)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.lists(st.floats(-6, 6), min_size=8, max_size=8))
def test_kl_non_negative(mu, lv):
    mu = torch.tensor(mu, dtype=torch.float64)[None]
    lv = torch.tensor(lv[: mu.shape[1]], dtype=torch.float64)[None]
    assert kl_to_standard_normal(GaussianPosterior(mu, lv)).item() >= 0.0


def test_kl_matches_monte_carlo_single():
    rng = np.random.default_rng(3)
    mu, lv = rng.normal(0, 1, 8), rng.normal(0, 0.5, 8)
    post = GaussianPosterior(torch.tensor(mu)[None], torch.tensor(lv)[None])
    mc = kl_monte_carlo(mu, lv, 10 ** 6, rng)
    assert relative_error(kl_to_standard_normal(post).item(), mc) < 0.01


def test_kl_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    mu = torch.randn(3, 2, 2, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    lv = torch.randn(3, 2, 2, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    f = lambda: kl_to_standard_normal(GaussianPosterior(mu, lv))  # noqa: E731
    f().backward()
    for tensor in (mu, lv):
        for i in range(0, tensor.numel(), 3):
            num = central_difference(f, tensor, i, 1e-5)
            assert relative_error(tensor.grad.view(-1)[i].item(), num) < 1e-4


@pytest.mark.slow
def test_trained_reconstruction_within_training_loss(aligned_run):
    from reals.data import load_dataset
    from reals.train import load_vae

    vae, _, _ = load_vae(aligned_run["out"] / "vae")
    recorded = json.loads((aligned_run["out"] / "train_vae.json").read_text())["train_recon"]
    images = load_dataset(aligned_run["cfg"]).images
    with torch.no_grad():
        mse = float(((decode(vae, encode(vae, images).mu) - images) ** 2).mean())
    assert mse < recorded * 1.1
