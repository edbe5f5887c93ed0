import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from glassdepth.denoiser import (
    PARAM_GROUPS,
    ConditionalDenoiser,
    MultiScaleExtractor,
    SpatialSelfAttention,
    SqueezeExcite,
    fuse_features,
    predict,
    timestep_embedding,
)


def small_model(**kw):
    args = dict(latent_channels=4, channels=16, blocks=2, feat_channels=(4, 8, 8), cond_channels=8, time_dim=8)
    args.update(kw)
    torch.manual_seed(0)
    return ConditionalDenoiser(**args)


def test_pyramid_shapes():
    pyr = MultiScaleExtractor(3)(torch.randn(2, 3, 48, 64))
    assert [tuple(f.shape[-2:]) for f in pyr] == [(48, 64), (24, 32), (12, 16)]
    assert [f.shape[1] for f in pyr] == [16, 32, 64]


def test_pyramid_rejects_indivisible():
    with pytest.raises(ValueError, match=r"pad by \(2, 1\)"):
        MultiScaleExtractor(3)(torch.randn(1, 3, 46, 63))


def test_zero_input_zero_bias_gives_zero_pyramid():
    ext = MultiScaleExtractor(1)
    for m in ext.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.zeros_(m.bias)
    assert all(torch.count_nonzero(f) == 0 for f in ext(torch.zeros(1, 1, 16, 16)))


def test_translation_equivariance_interior():
    torch.manual_seed(1)
    ext = MultiScaleExtractor(1, (4, 4, 4)).double()
    img = torch.zeros(1, 1, 96, 96, dtype=torch.float64)
    img[..., 40:52, 38:54] = torch.rand(12, 16, dtype=torch.float64)
    shifted = torch.roll(img, shifts=(4, 4), dims=(2, 3))
    a, b = ext(img)[-1], ext(shifted)[-1]
    # cells 6..17 see no image border in either input (receptive field < 6 cells)
    torch.testing.assert_close(b[..., 7:18, 7:18], a[..., 6:17, 6:17], rtol=1e-12, atol=1e-12)


def test_zero_pyramids_give_projected_bias():
    proj, att = nn.Conv2d(12, 6, 1), SpatialSelfAttention(6)
    zeros = [torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 2, 2)]
    c = fuse_features(zeros, zeros, proj, att)
    bias_map = proj.bias.detach()[None, :, None, None].expand(1, 6, 2, 2)
    torch.testing.assert_close(c, att(bias_map))
    assert torch.allclose(c, c[..., :1, :1].expand_as(c))


def test_uniform_attention_closed_form():
    att = SpatialSelfAttention(5).double()
    with torch.no_grad():
        for lin in (att.q, att.k):
            lin.weight.zero_()
            lin.bias.zero_()
        for lin in (att.v, att.out):
            lin.weight.copy_(torch.eye(5))
            lin.bias.zero_()
    x = torch.randn(2, 5, 3, 4, dtype=torch.float64)
    y, w = att(x, return_weights=True)
    torch.testing.assert_close(w, torch.full_like(w, 1 / 12))
    torch.testing.assert_close(y, x + x.mean(dim=(2, 3), keepdim=True))


def test_attention_rows_are_distributions():
    _, w = SpatialSelfAttention(8)(torch.randn(3, 8, 4, 5) * 10, return_weights=True)
    assert torch.all(w >= 0)
    torch.testing.assert_close(w.sum(-1), torch.ones(3, 20), atol=1e-6, rtol=0)


def test_channel_permutation_symmetry():
    torch.manual_seed(2)
    proj, att = nn.Conv2d(12, 6, 1), SpatialSelfAttention(6)
    rgb = [torch.randn(1, 2, 8, 8), torch.randn(1, 2, 4, 4), torch.randn(1, 2, 2, 2)]
    dep = [torch.randn(1, 2, 8, 8), torch.randn(1, 2, 4, 4), torch.randn(1, 2, 2, 2)]
    ref = fuse_features(rgb, dep, proj, att)
    perm_rgb = [f.flip(1) for f in rgb]
    perm_dep = [f.flip(1) for f in dep]
    # concat order per scale is [rgb_s, depth_s]; flipping channels inside each block
    idx = torch.cat([torch.arange(i, i + 2).flip(0) for i in range(0, 12, 2)])
    proj2 = nn.Conv2d(12, 6, 1)
    with torch.no_grad():
        proj2.weight.copy_(proj.weight[:, idx])
        proj2.bias.copy_(proj.bias)
    torch.testing.assert_close(fuse_features(perm_rgb, perm_dep, proj2, att), ref, rtol=1e-5, atol=1e-6)


def test_fuse_rejects_mismatched_pyramids():
    a = [torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 2, 2)]
    b = [torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 4, 4)]
    with pytest.raises(ValueError):
        fuse_features(a, b, nn.Conv2d(12, 6, 1), SpatialSelfAttention(6))
    with pytest.raises(ValueError):
        fuse_features(a, [torch.zeros(1, 2, 6, 8)] + a[1:], nn.Conv2d(12, 6, 1), SpatialSelfAttention(6))


def test_squeeze_excite_gates_in_open_interval():
    se = SqueezeExcite(8, 2)
    g = se.gates(torch.randn(4, 8, 3, 3) * 5)
    assert torch.all((g > 0) & (g < 1))


def test_timestep_embedding_values():
    e = timestep_embedding(torch.tensor([0, 7]), 6)
    freqs = np.exp(-np.log(10000.0) * np.arange(3) / 3)
    np.testing.assert_allclose(e[1].numpy(), np.concatenate([np.cos(7 * freqs), np.sin(7 * freqs)]), rtol=1e-12)
    assert timestep_embedding(torch.tensor([3]), 5).shape == (1, 5)


def test_predict_deterministic_and_shape():
    m = small_model().eval()
    x, c = torch.randn(2, 4, 3, 4), torch.randn(2, 8, 3, 4)
    a, b = m.predict(x, torch.tensor([5, 900]), c), m.predict(x, torch.tensor([5, 900]), c)
    assert a.shape == x.shape and torch.equal(a, b)


@given(channels=st.sampled_from([8, 12, 16]), blocks=st.integers(0, 3), latent=st.integers(1, 5),
       cond=st.sampled_from([4, 6]), h=st.integers(2, 4), w=st.integers(2, 4))
def test_predict_shape_property(channels, blocks, latent, cond, h, w):
    m = ConditionalDenoiser(latent, channels, blocks, (2, 4, 4), cond, 6)
    rgb, depth = torch.rand(1, 3, 4 * h, 4 * w), torch.rand(1, 1, 4 * h, 4 * w)
    x = torch.randn(1, latent, h, w)
    assert m(x, torch.tensor([3]), rgb, depth).shape == x.shape


def test_predict_errors():
    m = small_model()
    c = torch.randn(1, 8, 3, 4)
    with pytest.raises(ValueError):
        m.predict(torch.randn(1, 4, 2, 4), torch.tensor([1]), c)
    with pytest.raises(ValueError):
        m.predict(torch.randn(1, 3, 3, 4), torch.tensor([1]), c)
    with pytest.raises(ValueError, match="outside"):
        predict(torch.randn(1, 4, 3, 4), 1000, c, m, T=1000)
    with pytest.raises(ValueError, match="outside"):
        predict(torch.randn(1, 4, 3, 4), -1, c, m, T=1000)
    with pytest.raises(ValueError):
        m.condition(torch.rand(1, 3, 12, 16))  # refined mode needs depth


def test_residual_identity_when_scales_zero():
    m = small_model(residual_init=0.0).double()
    x, c = torch.randn(2, 4, 3, 4, dtype=torch.float64), torch.randn(2, 8, 3, 4, dtype=torch.float64)
    t = torch.tensor([3, 400])
    h, _ = m.embed(x, t, c)
    torch.testing.assert_close(m.predict(x, t, c), m.head(h), rtol=0, atol=0)


def test_condition_sensitivity():
    m = small_model().eval()
    x = torch.randn(1, 4, 3, 4)
    a = m.predict(x, torch.tensor([10]), torch.randn(1, 8, 3, 4))
    b = m.predict(x, torch.tensor([10]), torch.randn(1, 8, 3, 4))
    assert not torch.equal(a, b)
    rgb, d1 = torch.rand(1, 3, 12, 16), torch.rand(1, 1, 12, 16)
    assert not torch.equal(m(x, torch.tensor([10]), rgb, d1), m(x, torch.tensor([10]), rgb, d1 * 0.5))


def test_rgb_only_drops_depth_branch():
    m = small_model(condition_mode="rgb_only")
    assert m.depth_features is None
    assert "depth_features" not in m.param_groups()
    c = m.condition(torch.rand(1, 3, 12, 16), torch.rand(1, 1, 12, 16))  # depth ignored
    assert c.shape == (1, 8, 3, 4)
    with pytest.raises(ValueError):
        small_model(condition_mode="depth_only")


def test_param_groups_cover_every_parameter():
    m = small_model()
    groups = m.param_groups()
    assert set(groups) == set(PARAM_GROUPS)
    assert sum(len(v) for v in groups.values()) == len(list(m.parameters()))


def test_parameter_count_deterministic():
    count = lambda: sum(p.numel() for p in small_model().parameters())
    assert count() == count()


def scalar_loss(m, x, t, rgb, depth, target):
    return ((m(x, t, rgb, depth) - target) ** 2).mean()


def test_finite_difference_gradient_float64():
    m = small_model().double()
    g = torch.Generator().manual_seed(3)
    rgb = torch.rand(2, 3, 12, 16, generator=g, dtype=torch.float64)
    depth = torch.rand(2, 1, 12, 16, generator=g, dtype=torch.float64)
    x = torch.randn(2, 4, 3, 4, generator=g, dtype=torch.float64)
    target = torch.randn(2, 4, 3, 4, generator=g, dtype=torch.float64)
    t = torch.tensor([17, 640])
    m.zero_grad()
    scalar_loss(m, x, t, rgb, depth, target).backward()
    params = dict(m.named_parameters())
    flat = [(n, i) for n, p in params.items() for i in range(p.numel())]
    rs = np.random.default_rng(0)
    picks = rs.choice(len(flat), size=max(1, len(flat) // 100), replace=False)
    h = 1e-6
    with torch.no_grad():
        for k in picks:
            name, i = flat[k]
            p = params[name].view(-1)
            old = p[i].item()
            p[i] = old + h
            up = scalar_loss(m, x, t, rgb, depth, target).item()
            p[i] = old - h
            dn = scalar_loss(m, x, t, rgb, depth, target).item()
            p[i] = old
            fd = (up - dn) / (2 * h)
            an = params[name].grad.view(-1)[i].item()
            assert abs(fd - an) <= 1e-4 * max(abs(an), abs(fd)) + 1e-10, (name, i, fd, an)
