import json

import numpy as np
import pytest
import torch

from glassdepth.codec import batch_pixel_loss
from glassdepth.io import load_checkpoint
from glassdepth.scheduler import make_timestep_plan
from glassdepth.training import (
    DiffusionPipeline,
    TrainingError,
    diffusion_loss,
    infer,
    latent_l2,
    load_codec,
    load_denoiser,
    param_checksum,
    sample_training_timestep,
    sample_training_timesteps,
    total_loss,
    train_diffusion,
    with_overrides,
)


@pytest.fixture
def fixture_tensors():
    g = torch.Generator().manual_seed(5)
    return (torch.randn(3, 2, 4, 6, generator=g, dtype=torch.float64),
            torch.randn(3, 2, 4, 6, generator=g, dtype=torch.float64),
            torch.rand(3, 1, 16, 24, generator=g, dtype=torch.float64),
            torch.rand(3, 1, 16, 24, generator=g, dtype=torch.float64))


def test_diffusion_loss_examples(fixture_tensors):
    a, b, _, _ = fixture_tensors
    assert diffusion_loss(a, a) == 0
    assert float(diffusion_loss(a + 0.3, a)) == pytest.approx(0.09, rel=1e-12)
    ref = sum(float(x - y) ** 2 for x, y in zip(a.flatten(), b.flatten())) / a.numel()
    assert float(diffusion_loss(a, b)) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        diffusion_loss(a, b[:2])


def test_latent_l2_per_sample_rms(fixture_tensors):
    a, b, _, _ = fixture_tensors
    ref = np.mean([np.sqrt(((a[i] - b[i]) ** 2).mean().item()) for i in range(3)])
    assert float(latent_l2(a, b)) == pytest.approx(ref, rel=1e-10)


def test_total_loss_identities(fixture_tensors, tiny_cfg):
    a, b, dec, gt = fixture_tensors
    zero = with_overrides(tiny_cfg, train={"lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.0})
    assert float(total_loss(a, b, dec, gt, zero)) == 0.0
    only = with_overrides(tiny_cfg, train={"lambda1": 1.0, "lambda2": 0.0, "lambda3": 0.0})
    assert float(total_loss(a, b, dec, gt, only)) == float(diffusion_loss(a, b))
    ones = with_overrides(tiny_cfg, train={"lambda1": 1.0, "lambda2": 1.0, "lambda3": 1.0})
    parts = float(diffusion_loss(a, b)) + float(batch_pixel_loss(dec, gt, 0.5)) + float(latent_l2(a, b))
    assert float(total_loss(a, b, dec, gt, ones)) == pytest.approx(parts, rel=1e-14)


def test_negative_weight_rejected(tiny_cfg):
    from glassdepth.config import ConfigError

    with pytest.raises(ConfigError):
        with_overrides(tiny_cfg, train={"lambda2": -1.0})


def test_timestep_histogram_uniform(tiny_cfg):
    cfg = with_overrides(tiny_cfg, schedule={"T": 1000}, train={"inference_count": 20})
    rng = np.random.Generator(np.random.PCG64(0))
    n = 100_000
    draws = sample_training_timesteps(cfg, make_timestep_plan(1000, 20), rng, n)
    counts = np.bincount(draws, minlength=1000)
    assert counts.size == 1000
    p = 1 / 1000
    sigma = np.sqrt(n * p * (1 - p))
    # Bonferroni-style: allow a handful of bins out of 1000 beyond 3 sigma
    assert np.sum(np.abs(counts - n * p) > 3 * sigma) <= 10
    assert np.all(np.abs(counts - n * p) < 5 * sigma)


def test_timestep_on_plan_support(tiny_cfg):
    cfg = with_overrides(tiny_cfg, schedule={"T": 1000}, train={"inference_count": 20, "train_on_plan": True})
    plan = make_timestep_plan(1000, 20)
    rng = np.random.Generator(np.random.PCG64(1))
    assert set(sample_training_timesteps(cfg, plan, rng, 20_000).tolist()) == set(plan.steps)
    single = with_overrides(tiny_cfg, train={"inference_count": 1, "train_on_plan": True})
    assert {sample_training_timestep(single, make_timestep_plan(50, 1), rng) for _ in range(50)} == {0}


def test_smoke_and_log(tiny_split, tiny_codec, tiny_cfg, tmp_path):
    small = tiny_split.subset(range(4))
    model = train_diffusion(small, tiny_codec, tiny_cfg, tmp_path, max_steps=1)
    assert (tmp_path / "denoiser.ckpt").exists()
    records = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert len(records) == 1 and np.isfinite(records[0]["loss"])
    assert {"step", "loss", "l_ddim", "l_pixel", "l_2", "wall"} <= set(records[0])
    loaded, cfg = load_denoiser(tmp_path / "denoiser.ckpt")
    assert param_checksum(loaded) == param_checksum(model)
    assert cfg.train == tiny_cfg.train


def test_training_deterministic(tiny_split, tiny_codec, tiny_cfg):
    a = train_diffusion(tiny_split, tiny_codec, tiny_cfg, max_steps=3)
    b = train_diffusion(tiny_split, tiny_codec, tiny_cfg, max_steps=3)
    assert param_checksum(a) == param_checksum(b)


def test_frozen_codec_unchanged(tiny_split, tiny_codec, tiny_cfg):
    before = param_checksum(tiny_codec)
    train_diffusion(tiny_split, tiny_codec, tiny_cfg, max_steps=2)
    assert param_checksum(tiny_codec) == before
    assert not any(p.requires_grad for p in tiny_codec.parameters())


def test_missing_codec_and_empty_split(tiny_split, tiny_cfg, tmp_path):
    with pytest.raises(TrainingError):
        train_diffusion(tiny_split, None, tiny_cfg)
    with pytest.raises(FileNotFoundError):
        load_codec(tmp_path / "nope.ckpt")


def test_gradient_flow_every_group(tiny_split, tiny_codec, tiny_cfg):
    from glassdepth.training import build_denoiser

    torch.manual_seed(tiny_cfg.train.seed)
    fresh = build_denoiser(tiny_cfg)
    before = {n: p.detach().clone() for n, p in fresh.named_parameters()}
    trained = train_diffusion(tiny_split, tiny_codec, tiny_cfg, max_steps=1)
    changed = {n.split(".")[0] for n, p in trained.named_parameters() if not torch.equal(p, before[n])}
    assert changed == set(trained.param_groups())


def test_nan_loss_aborts_with_diagnostics(tiny_split, tiny_codec, tiny_cfg, monkeypatch):
    import glassdepth.training as tr

    real, calls = tr.loss_terms, []

    def poisoned(*args):
        terms = real(*args)
        calls.append(1)
        if len(calls) == 2:
            terms["l_pixel"] = terms["l_pixel"] * float("nan")
        return terms

    monkeypatch.setattr(tr, "loss_terms", poisoned)
    with pytest.raises(TrainingError, match=r"non-finite loss at step 1: .*l_pixel=nan.*timesteps"):
        train_diffusion(tiny_split, tiny_codec, tiny_cfg, max_steps=3)


def test_codec_checkpoint_round_trip(tiny_codec, tiny_cfg, tmp_path):
    from glassdepth.training import save_codec

    digest = save_codec(tiny_codec, tiny_cfg, tmp_path / "c.ckpt")
    assert digest == save_codec(tiny_codec, tiny_cfg, tmp_path / "d.ckpt")
    loaded, cfg = load_codec(tmp_path / "c.ckpt")
    assert param_checksum(loaded) == param_checksum(tiny_codec)
    tensors, _, _ = load_checkpoint(tmp_path / "c.ckpt", "codec")
    assert tensors["latent_scale"].shape == ()


def test_infer_contracts(tiny_samples, tiny_codec, tiny_model, tiny_cfg):
    plan = make_timestep_plan(50, 5)
    a = infer(tiny_samples[0], tiny_codec, tiny_model, plan, 3, tiny_cfg)
    b = infer(tiny_samples[0], tiny_codec, tiny_model, plan, 3, tiny_cfg)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.validity.all()
    assert np.all((a.values > tiny_cfg.codec.d_min) & (a.values < tiny_cfg.codec.d_max))
    with pytest.raises(ValueError, match="trained with T=50"):
        infer(tiny_samples[0], tiny_codec, tiny_model, make_timestep_plan(1000, 5), 3, tiny_cfg)


def test_single_step_plan_calls_denoiser_once(tiny_split, tiny_codec, tiny_model, tiny_cfg, monkeypatch):
    calls = []
    orig = tiny_model.predict
    monkeypatch.setattr(tiny_model, "predict", lambda *a: calls.append(1) or orig(*a))
    DiffusionPipeline(tiny_codec, tiny_model, tiny_cfg, make_timestep_plan(50, 1)).predict_split(tiny_split.subset([0]))
    assert len(calls) == 1


def test_pipeline_seed_per_sample(tiny_split, tiny_codec, tiny_model, tiny_cfg):
    pipe = DiffusionPipeline(tiny_codec, tiny_model, tiny_cfg, make_timestep_plan(50, 5), seed=0)
    full = pipe.predict_split(tiny_split.subset([0, 1, 2]))
    alone = DiffusionPipeline(tiny_codec, tiny_model, tiny_cfg, make_timestep_plan(50, 5), seed=2)
    np.testing.assert_allclose(alone.predict_split(tiny_split.subset([2]))[0], full[2], rtol=1e-5, atol=1e-6)


def test_denoiser_training_loss_finite_difference(tiny_split, tiny_codec, tiny_cfg):
    """Analytic gradient of the full scalar training loss vs central differences at float64."""
    from glassdepth.scheduler import forward_sample, make_schedule
    from glassdepth.training import build_denoiser, condition_inputs

    torch.manual_seed(0)
    model = build_denoiser(tiny_cfg).double()
    codec = tiny_codec.double()
    try:
        idx = [0, 1]
        x0 = codec.encode_normalized(tiny_split.gt_norm[idx].double())
        noise = torch.randn(x0.shape, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        t = np.array([7, 33])
        x_t = forward_sample(x0, t, noise, make_schedule(50))
        rgb, depth = condition_inputs(model, tiny_split, idx)
        rgb, depth = rgb.double(), depth.double()
        gt = tiny_split.gt_norm[idx].double()

        def loss():
            pred = model(x_t, torch.as_tensor(t), rgb, depth)
            return total_loss(pred, x0, codec.decode_normalized(pred), gt, tiny_cfg)

        model.zero_grad()
        loss().backward()
        params = dict(model.named_parameters())
        flat = [(n, i) for n, p in params.items() for i in range(p.numel())]
        picks = np.random.default_rng(0).choice(len(flat), size=60, replace=False)
        with torch.no_grad():
            for k in picks:
                n, i = flat[k]
                p = params[n].view(-1)
                old = p[i].item()
                p[i] = old + 1e-6
                up = loss().item()
                p[i] = old - 1e-6
                dn = loss().item()
                p[i] = old
                fd = (up - dn) / 2e-6
                an = params[n].grad.view(-1)[i].item()
                assert abs(fd - an) <= 1e-4 * max(abs(an), abs(fd)) + 1e-9, (n, i, fd, an)
    finally:
        codec.float()
