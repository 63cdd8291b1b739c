import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import central_difference, relative_error
from reals.alignment import (AlignHeads, CachedTeacher, Teacher, TeacherFeatures, alignment_loss, content_key,
                             cosine_loss, project, read_feature_cache, smooth_mse_loss, synthetic_teacher,
                             teacher_features, teacher_input_size, write_feature_cache)
from reals.data import synthetic_shapes
from reals.vae import ShapeError


@pytest.mark.parametrize("args,expected", [((256, 256, 8, 14), (448, 448)), ((512, 256, 8, 14), (896, 448)),
                                           ((32, 32, 8, 8), (32, 32)), ((64, 48, 4, 4), (64, 48))])
def test_teacher_input_size(args, expected):
    assert teacher_input_size(*args) == expected


def test_teacher_input_size_indivisible():
    with pytest.raises(ShapeError):
        teacher_input_size(30, 32, 8, 14)


@pytest.mark.parametrize("h,w,p", [(32, 32, 8), (64, 32, 8), (16, 24, 4), (32, 64, 4)])
@pytest.mark.parametrize("q", [14, 8, 5])
def test_teacher_grid_matches_latent_grid(h, w, p, q):
    teacher = synthetic_teacher(0, patch_size=q, feature_dim=6)
    feats = teacher_features(teacher, torch.rand(2, 3, h, w) * 2 - 1, p)
    assert feats.patch.shape == (2, h // p, w // p, 6)
    assert feats.cls.shape == (2, 6)


def test_synthetic_teacher_is_deterministic_and_frozen():
    images = synthetic_shapes(4, seed=1).images
    a = teacher_features(synthetic_teacher(7), images, 8)
    b = teacher_features(synthetic_teacher(7), images, 8)
    assert torch.equal(a.patch, b.patch) and torch.equal(a.cls, b.cls)
    c = teacher_features(synthetic_teacher(8), images, 8)
    assert not torch.equal(a.patch, c.patch)
    teacher = synthetic_teacher(7)
    assert isinstance(teacher, Teacher)
    assert not any(isinstance(v, torch.nn.Parameter) for v in vars(teacher).values())


def test_synthetic_teacher_shift_response():
    teacher = synthetic_teacher(3, patch_size=4, feature_dim=5)
    base = synthetic_shapes(3, seed=2).images * 0.5  # headroom so the shift stays unclipped
    c = 0.2
    f0, f1 = teacher.extract(base.double()), teacher.extract((base + c).double())
    u_patch, u_cls = teacher.shift_response()
    assert torch.allclose(f1.patch - f0.patch, torch.as_tensor(c * u_patch).expand_as(f0.patch), atol=1e-10)
    assert torch.allclose(f1.cls - f0.cls, torch.as_tensor(c * u_cls).expand_as(f0.cls), atol=1e-10)


def test_synthetic_teacher_cls_is_class_sensitive():
    from sklearn.metrics import silhouette_score

    ds = synthetic_shapes(240, seed=4)
    feats = teacher_features(synthetic_teacher(0), ds.images, 8)
    pixels = silhouette_score(ds.images.flatten(1).numpy(), ds.labels.numpy())
    assert silhouette_score(feats.cls.numpy(), ds.labels.numpy()) > max(0.3, pixels)


def test_teacher_features_rejects_mismatch():
    with pytest.raises(ShapeError):
        TeacherFeatures(torch.zeros(2, 4, 4, 3), torch.zeros(2, 4))


def test_heads_default_hidden_width():
    assert AlignHeads(4, 32).hidden == 32
    assert AlignHeads(16, 32).hidden == 64
    assert len([m for m in AlignHeads(4, 8, depth=4).mlp_patch if isinstance(m, torch.nn.Linear)]) == 4


def test_project_constant_grid_and_zero_heads():
    torch.manual_seed(0)
    heads = AlignHeads(4, 6)
    z = torch.randn(1, 1, 1, 4).expand(2, 3, 3, 4).contiguous()
    patch, cls = project(heads, z)
    assert torch.allclose(cls, heads.mlp_cls(z[:, 0, 0]))
    heads.zero_init_final_layers()
    patch, cls = project(heads, torch.randn(2, 3, 3, 4))
    assert torch.count_nonzero(patch) == 0 and torch.count_nonzero(cls) == 0


def test_project_permutation_equivariance():
    torch.manual_seed(0)
    heads = AlignHeads(4, 6)
    z = torch.randn(2, 3, 3, 4, dtype=torch.float64)
    heads.double()
    perm = torch.randperm(9)
    zp = z.reshape(2, 9, 4)[:, perm].reshape(2, 3, 3, 4)
    p0, c0 = project(heads, z)
    p1, c1 = project(heads, zp)
    assert torch.equal(p1.reshape(2, 9, 6), p0.reshape(2, 9, 6)[:, perm])
    assert torch.allclose(c0, c1, atol=1e-12)


def test_project_dim_mismatch():
    with pytest.raises(ShapeError):
        project(AlignHeads(4, 6), torch.zeros(1, 2, 2, 3))


def test_cosine_loss_examples():
    b = torch.tensor([[1.0, 2.0, -1.0]])
    assert cosine_loss(b.clone(), b).item() == pytest.approx(0, abs=1e-7)
    assert cosine_loss(-b, b).item() == pytest.approx(2, abs=1e-7)
    assert cosine_loss(torch.tensor([[2.0, -1.0, 0.0]]), b).item() == pytest.approx(1, abs=1e-7)
    with pytest.raises(ValueError):
        cosine_loss(b, torch.zeros(1, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1e-3, 1e3))
def test_cosine_loss_scale_invariant(seed, c):
    gen = torch.Generator().manual_seed(seed)
    a, b = torch.randn(5, 7, generator=gen, dtype=torch.float64), torch.randn(5, 7, generator=gen, dtype=torch.float64)
    assert abs(cosine_loss(c * a, b).item() - cosine_loss(a, b).item()) < 1e-6


def test_smooth_mse_examples():
    assert smooth_mse_loss(torch.zeros(3), torch.zeros(3)).item() == 0
    assert smooth_mse_loss(torch.tensor([0.5]), torch.zeros(1)).item() == pytest.approx(0.125)
    assert smooth_mse_loss(torch.tensor([2.0]), torch.zeros(1)).item() == pytest.approx(1.5)


def _features(seed, b=2, g=2, d=5):
    gen = torch.Generator().manual_seed(seed)
    return TeacherFeatures(torch.randn(b, g, g, d, generator=gen, dtype=torch.float64),
                           torch.randn(b, d, generator=gen, dtype=torch.float64))


def test_alignment_loss_examples():
    t = _features(0)
    assert alignment_loss((t.patch.clone(), t.cls.clone()), t).item() == pytest.approx(0, abs=1e-12)
    other = _features(1)
    assert alignment_loss((other.patch, other.cls), t, 0.0, 0.0).item() == 0.0
    # cos term 1 (orthogonal) and smooth term 0.5 on both patch and cls -> 0.9 + 0.05
    patch_t = torch.zeros(1, 1, 1, 2, dtype=torch.float64)
    patch_t[..., 0] = 1
    cls_t = patch_t[:, 0, 0]
    patch_p = torch.zeros_like(patch_t)
    patch_p[..., 1] = 1
    loss = alignment_loss((patch_p, patch_p[:, 0, 0]), TeacherFeatures(patch_t, cls_t), 0.9, 0.1)
    assert loss.item() == pytest.approx(0.95, abs=1e-12)


def test_alignment_loss_patch_cls_flags():
    t, p = _features(0), _features(1)
    only_patch = alignment_loss((p.patch, p.cls), t, use_cls=False)
    only_cls = alignment_loss((p.patch, p.cls), t, use_patch=False)
    both = alignment_loss((p.patch, p.cls), t)
    assert both.item() == pytest.approx((only_patch.item() + only_cls.item()) / 2, abs=1e-12)
    with pytest.raises(ValueError):
        alignment_loss((p.patch, p.cls), t, use_patch=False, use_cls=False)
    with pytest.raises(ShapeError):
        alignment_loss((p.patch[:, :1], p.cls), t)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_alignment_loss_non_negative(seed):
    t, p = _features(seed), _features(seed + 1)
    assert alignment_loss((p.patch, p.cls), t).item() >= 0


def test_alignment_loss_zero_iff_exact_match():
    t = _features(0)
    scaled = alignment_loss((2 * t.patch, 2 * t.cls), t)
    assert scaled.item() > 0  # same direction, wrong value


def test_no_gradient_into_teacher():
    t = _features(0)
    t.patch.requires_grad_(True)
    t.cls.requires_grad_(True)
    p = _features(1)
    p.patch.requires_grad_(True)
    alignment_loss((p.patch, p.cls), t).backward()
    assert t.patch.grad is None and t.cls.grad is None
    assert p.patch.grad is not None


def test_alignment_gradient_matches_finite_differences():
    torch.manual_seed(0)
    heads = AlignHeads(4, 6).double()
    z = torch.randn(3, 2, 2, 4, dtype=torch.float64)
    t = _features(5, b=3, d=6)
    f = lambda: alignment_loss(project(heads, z), t, 0.9, 0.1)  # noqa: E731
    heads.zero_grad()
    f().backward()
    rng = np.random.default_rng(0)
    for name, param in heads.named_parameters():
        for i in rng.choice(param.numel(), size=min(param.numel(), 25), replace=False):
            num = central_difference(f, param, int(i), 1e-6)
            assert relative_error(param.grad.view(-1)[i].item(), num, floor=1e-7) < 1e-4, name


def test_feature_cache_round_trip(tmp_path):
    images = synthetic_shapes(3, seed=0).images
    feats = teacher_features(synthetic_teacher(0), images, 8)
    keys = write_feature_cache(tmp_path, images, feats)
    assert keys == [content_key(img.numpy()) for img in images]
    back = read_feature_cache(tmp_path)
    assert torch.equal(back.patch, feats.patch) and torch.equal(back.cls, feats.cls)
    cached = CachedTeacher(tmp_path, patch_size=8, feature_dim=feats.cls.shape[-1])
    again = cached.extract(images)
    assert torch.equal(again.patch, feats.patch)
    with pytest.raises(KeyError):
        cached.extract(images + 1)
