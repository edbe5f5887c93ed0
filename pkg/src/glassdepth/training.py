"""Two-stage training (depth codec, then conditioned diffusion) and inference."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .codec import DepthCodec, DepthNormalization, batch_pixel_loss, codec_from_state, codec_state, latent_statistics
from .config import ExperimentConfig
from .dataset import SceneSample
from .denoiser import ConditionalDenoiser, denoiser_state
from .geometry import DepthMap, refine_depth
from .io import load_checkpoint, save_checkpoint
from .scheduler import NoiseSchedule, TimestepPlan, ddim_step, forward_sample, make_schedule, make_timestep_plan

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ data


@dataclass
class PreparedSplit:
    """Stacked arrays for a list of samples; depths normalised for the networks."""

    ids: list[str]
    rgb: torch.Tensor          # (N, 3, H, W)
    gt_norm: torch.Tensor      # (N, 1, H, W)
    refined_norm: torch.Tensor  # (N, 1, H, W), clipped to [0, 1]
    gt: np.ndarray             # (N, H, W) metres
    refined: np.ndarray        # (N, H, W) metres
    raw: np.ndarray            # (N, H, W) metres, 0 = invalid
    mask: np.ndarray           # (N, H, W) bool

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "PreparedSplit":
        idx = list(idx)
        return PreparedSplit([self.ids[i] for i in idx], self.rgb[idx], self.gt_norm[idx], self.refined_norm[idx],
                             self.gt[idx], self.refined[idx], self.raw[idx], self.mask[idx])


def refine_samples(samples: list[SceneSample], cfg: ExperimentConfig) -> np.ndarray:
    """Global-optimization refinement of every sample, stacked (N, H, W)."""
    return np.stack([
        refine_depth(s.raw_depth, s.mask, s.normals, s.boundaries, s.intrinsics, cfg.geometry).values
        for s in samples
    ])


def prepare_split(samples: list[SceneSample], cfg: ExperimentConfig, refined: np.ndarray | None = None) -> PreparedSplit:
    """Stack samples for the networks; ``refined`` skips the solve when precomputed."""
    if not samples:
        raise ValueError("empty dataset")
    norm = DepthNormalization(cfg.codec.d_min, cfg.codec.d_max)
    if refined is None:
        refined = refine_samples(samples, cfg)
    elif np.shape(refined) != (len(samples),) + samples[0].gt_depth.shape:
        raise ValueError(f"precomputed refined depth has shape {np.shape(refined)}")
    gt = np.stack([s.gt_depth.values for s in samples])
    as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)
    return PreparedSplit(
        ids=[s.id for s in samples],
        rgb=as_t(np.stack([s.rgb.transpose(2, 0, 1) for s in samples])),
        gt_norm=as_t(norm.normalize(gt)[:, None]),
        refined_norm=as_t(np.clip(norm.normalize(refined), 0.0, 1.0)[:, None]),
        gt=gt,
        refined=refined,
        raw=np.stack([s.raw_depth.filled(0.0) for s in samples]),
        mask=np.stack([s.mask for s in samples]),
    )


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _cosine(step, total, base):
    return 0.5 * base * (1 + math.cos(math.pi * min(step, total) / max(total, 1)))


def param_checksum(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------- losses


def diffusion_loss(pred_x0, true_x0):
    if tuple(pred_x0.shape) != tuple(true_x0.shape):
        raise ValueError("latent shapes differ")
    return ((pred_x0 - true_x0) ** 2).mean()


def latent_l2(pred_x0, true_x0):
    """Per-sample Euclidean distance between latents, RMS-normalised, batch mean."""
    d = (pred_x0 - true_x0).flatten(1)
    return (torch.sqrt((d * d).sum(1) + 1e-24) / math.sqrt(d.shape[1])).mean()


def loss_terms(pred_x0, true_x0, decoded_pred, gt_depth, pixel_lambda: float):
    return {
        "l_ddim": diffusion_loss(pred_x0, true_x0),
        "l_pixel": batch_pixel_loss(decoded_pred, gt_depth, pixel_lambda),
        "l_2": latent_l2(pred_x0, true_x0),
    }


def total_loss(pred_x0, true_x0, decoded_pred, gt_depth, cfg: ExperimentConfig):
    tc = cfg.train
    if min(tc.lambda1, tc.lambda2, tc.lambda3) < 0:
        raise ValueError("loss weights must be non-negative")
    terms = loss_terms(pred_x0, true_x0, decoded_pred, gt_depth, cfg.codec.pixel_lambda)
    return tc.lambda1 * terms["l_ddim"] + tc.lambda2 * terms["l_pixel"] + tc.lambda3 * terms["l_2"]


def sample_training_timestep(cfg: ExperimentConfig, plan: TimestepPlan, rng: np.random.Generator) -> int:
    return int(sample_training_timesteps(cfg, plan, rng, 1)[0])


def sample_training_timesteps(cfg: ExperimentConfig, plan: TimestepPlan, rng: np.random.Generator, n: int):
    if cfg.train.train_on_plan:
        steps = np.asarray(plan.steps, dtype=np.int64)
        return steps[rng.integers(0, len(steps), size=n)]
    return rng.integers(0, cfg.schedule.T, size=n)


# ------------------------------------------------------------------ codec


def train_codec(train: PreparedSplit, cfg: ExperimentConfig, out_dir=None) -> DepthCodec:
    """Fit the depth autoencoder on ground-truth depth, then freeze it."""
    cc = cfg.codec
    torch.manual_seed(cc.seed)
    codec = DepthCodec(cc.latent_channels, cc.hidden)
    opt = torch.optim.Adam(codec.parameters(), lr=cc.lr)
    rng = np.random.Generator(np.random.PCG64(cc.seed))
    total = cc.epochs * math.ceil(len(train) / cc.batch_size)
    step = 0
    records = []
    for epoch in range(cc.epochs):
        for idx in _batches(len(train), cc.batch_size, rng):
            x = train.gt_norm[idx]
            for g in opt.param_groups:
                g["lr"] = _cosine(step, total, cc.lr)
            z = codec.encode_raw(x)
            recon = codec.decode_channels(z).mean(dim=1, keepdim=True)
            loss = batch_pixel_loss(recon, x, cc.pixel_lambda) + cc.latent_reg * (z * z).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"codec loss became {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        records.append({"epoch": epoch, "loss": float(loss.detach())})
    latent_statistics(codec, [train.gt_norm[i : i + 64] for i in range(0, len(train), 64)])
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_codec(codec, cfg, out / "codec.ckpt")
        (out / "codec_log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    return codec


def save_codec(codec: DepthCodec, cfg: ExperimentConfig, path) -> str:
    return save_checkpoint(path, "codec", codec_state(codec), config_mod.to_flat_json(cfg))


def load_codec(path) -> tuple[DepthCodec, ExperimentConfig]:
    if not Path(path).exists():
        raise FileNotFoundError(f"codec checkpoint {path} not found")
    tensors, flat, _ = load_checkpoint(path, "codec")
    cfg = config_mod.from_flat_json(flat)
    codec = codec_from_state(tensors, cfg.codec.latent_channels, cfg.codec.hidden)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec, cfg


def codec_reconstruction_rmse(codec: DepthCodec, split: PreparedSplit) -> float:
    """RMSE of decode(encode(d)) in normalised depth units."""
    with torch.no_grad():
        se, n = 0.0, 0
        for i in range(0, len(split), 64):
            x = split.gt_norm[i : i + 64]
            r = codec.decode_normalized(codec.encode_normalized(x))
            se += float(((r - x) ** 2).sum())
            n += x.numel()
    return math.sqrt(se / n)


# -------------------------------------------------------------- diffusion


def build_denoiser(cfg: ExperimentConfig) -> ConditionalDenoiser:
    return ConditionalDenoiser.from_config(cfg.denoiser, cfg.codec.latent_channels)


def condition_inputs(model: ConditionalDenoiser, split: PreparedSplit, idx):
    depth = split.refined_norm[idx] if model.condition_mode == "refined" else None
    return split.rgb[idx], depth


def train_diffusion(train: PreparedSplit, codec: DepthCodec, cfg: ExperimentConfig, out_dir=None,
                    max_steps: int | None = None) -> ConditionalDenoiser:
    """Train the conditioned denoiser against a frozen codec.

    Writes ``denoiser.ckpt`` and ``train_log.jsonl`` under ``out_dir`` when given.
    """
    if codec is None:
        raise TrainingError("diffusion training needs a trained codec")
    if len(train) == 0:
        raise TrainingError("empty training set")
    tc = cfg.train
    schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    plan = make_timestep_plan(cfg.schedule.T, tc.inference_count)
    torch.manual_seed(tc.seed)
    model = build_denoiser(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.Generator(np.random.PCG64(tc.seed))
    gen = torch.Generator().manual_seed(tc.seed)
    codec_sum = param_checksum(codec)

    with torch.no_grad():
        x0_all = torch.cat([codec.encode_normalized(train.gt_norm[i : i + 64]) for i in range(0, len(train), 64)])

    steps_per_epoch = math.ceil(len(train) / tc.batch_size)
    total = tc.epochs * steps_per_epoch if max_steps is None else max_steps
    records = []
    start = time.time()
    step = 0
    model.train()
    while step < total:
        for idx in _batches(len(train), tc.batch_size, rng):
            if step >= total:
                break
            for g in opt.param_groups:
                g["lr"] = _cosine(step, total, tc.lr)
            x0 = x0_all[idx]
            t = sample_training_timesteps(cfg, plan, rng, len(idx))
            noise = torch.randn(x0.shape, generator=gen)
            x_t = forward_sample(x0, t, noise, schedule)
            rgb, depth = condition_inputs(model, train, idx)
            pred = model.predict(x_t, torch.as_tensor(t), model.condition(rgb, depth))
            decoded = codec.decode_normalized(pred)
            terms = loss_terms(pred, x0, decoded, train.gt_norm[idx], cfg.codec.pixel_lambda)
            loss = tc.lambda1 * terms["l_ddim"] + tc.lambda2 * terms["l_pixel"] + tc.lambda3 * terms["l_2"]
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at step {step}: " + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items())
                    + f"; timesteps {t.tolist()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % tc.log_every == 0 or step == total - 1:
                records.append({
                    "step": step, "epoch": step // steps_per_epoch, "loss": float(loss.detach()),
                    **{k: float(v.detach()) for k, v in terms.items()}, "lr": opt.param_groups[0]["lr"],
                    "wall": round(time.time() - start, 3),
                })
            step += 1
    model.eval()
    if param_checksum(codec) != codec_sum:
        raise TrainingError("codec parameters changed during diffusion training")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_denoiser(model, cfg, out / "denoiser.ckpt")
        (out / "train_log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    model.train_log = records
    return model


def save_denoiser(model: ConditionalDenoiser, cfg: ExperimentConfig, path) -> str:
    return save_checkpoint(path, "denoiser", denoiser_state(model), config_mod.to_flat_json(cfg))


def load_denoiser(path) -> tuple[ConditionalDenoiser, ExperimentConfig]:
    from .codec import load_state_strict

    if not Path(path).exists():
        raise FileNotFoundError(f"denoiser checkpoint {path} not found")
    tensors, flat, _ = load_checkpoint(path, "denoiser")
    cfg = config_mod.from_flat_json(flat)
    model = build_denoiser(cfg)
    load_state_strict(model, tensors)
    model.eval()
    return model, cfg


# -------------------------------------------------------------- inference


def initial_noise(shape, seed: int) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(int(seed)))


@torch.no_grad()
def sample_latents(model: ConditionalDenoiser, rgb, depth, plan: TimestepPlan, schedule: NoiseSchedule, seeds,
                   latent_shape) -> torch.Tensor:
    if max(plan.steps) >= schedule.T:
        raise ValueError(f"plan reaches t={max(plan.steps)} but the model was trained with T={schedule.T}")
    c = model.condition(rgb, depth)
    x = torch.stack([initial_noise(latent_shape, s) for s in seeds])
    for t, t_prev in plan.pairs():
        pred = model.predict(x, torch.full((x.shape[0],), t, dtype=torch.long), c)
        x = ddim_step(x, pred, t, t_prev, schedule)
    return x


@dataclass
class DiffusionPipeline:
    codec: DepthCodec
    model: ConditionalDenoiser
    cfg: ExperimentConfig
    plan: TimestepPlan
    seed: int = 0
    batch_size: int = 64

    @property
    def schedule(self) -> NoiseSchedule:
        s = self.cfg.schedule
        return make_schedule(s.T, s.beta_start, s.beta_end)

    def predict_split(self, split: PreparedSplit) -> np.ndarray:
        """Completed depth (N, H, W) in metres; sample ``i`` starts from seed ``seed + i``."""
        norm = DepthNormalization(self.cfg.codec.d_min, self.cfg.codec.d_max)
        h, w = split.gt.shape[1:]
        shape = (self.cfg.codec.latent_channels, h // 4, w // 4)
        schedule = self.schedule
        out = []
        for i in range(0, len(split), self.batch_size):
            idx = list(range(i, min(i + self.batch_size, len(split))))
            rgb, depth = condition_inputs(self.model, split, idx)
            z = sample_latents(self.model, rgb, depth, self.plan, schedule, [self.seed + j for j in idx], shape)
            with torch.no_grad():
                out.append(norm.denormalize(self.codec.decode_normalized(z)[:, 0].double().numpy()))
        return np.concatenate(out)


def infer(sample: SceneSample, codec: DepthCodec, model: ConditionalDenoiser, plan: TimestepPlan, seed: int,
          cfg: ExperimentConfig) -> DepthMap:
    """Complete one sample's depth: preprocess, condition, DDIM over ``plan``, decode."""
    split = prepare_split([sample], cfg)
    pipe = DiffusionPipeline(codec, model, cfg, plan, seed)
    return DepthMap.complete(pipe.predict_split(split)[0])


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy of ``cfg`` with per-section field replacements, e.g. ``train={"epochs": 1}``."""
    out = config_mod.apply_overrides(cfg, {})
    for section, values in sections.items():
        setattr(out, section, dataclasses.replace(getattr(out, section), **values))
    out.validate()
    return out
