"""Conditioned denoiser: multi-scale RGB/depth features fused into a visual
condition at 1/4 resolution, and an x_0 predictor built from bottleneck
residual blocks with squeeze-excite channel attention.

Tensors are channels-first: images (B, K, H, W), latents and conditions
(B, C, H/4, W/4).
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PARAM_GROUPS = ("rgb_features", "depth_features", "fusion", "attention", "time_embed", "stem", "blocks", "head")


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class MultiScaleExtractor(nn.Module):
    """Three-stage strided conv stack returning features at 1/1, 1/2 and 1/4 scale."""

    def __init__(self, in_channels: int, feat_channels=(16, 32, 64)):
        super().__init__()
        f1, f2, f3 = feat_channels
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_channels, f1, 3, padding=1), nn.SiLU(), nn.Conv2d(f1, f1, 3, padding=1), nn.SiLU()),
            nn.Sequential(nn.Conv2d(f1, f2, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(f2, f2, 3, padding=1), nn.SiLU()),
            nn.Sequential(nn.Conv2d(f2, f3, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(f3, f3, 3, padding=1), nn.SiLU()),
        ])

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(
                f"input {h}x{w} must be divisible by 4; pad by ({-h % 4}, {-w % 4}) rows/cols"
            )
        feats, x = [], image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class SpatialSelfAttention(nn.Module):
    """Single-head full self-attention over the flattened grid, with a residual."""

    def __init__(self, channels: int):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, return_weights: bool = False):
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)
        scores = self.q(seq) @ self.k(seq).transpose(1, 2) / math.sqrt(c)
        weights = scores.softmax(dim=-1)
        y = seq + self.out(weights @ self.v(seq))
        y = y.transpose(1, 2).reshape(b, c, h, w)
        return (y, weights) if return_weights else y


def fuse_features(rgb_pyramid, depth_pyramid, projection: nn.Module, attention: SpatialSelfAttention):
    """Concatenate per-scale features, pool to 1/4 scale, 1x1-project, attend."""
    if depth_pyramid is not None:
        if len(rgb_pyramid) != len(depth_pyramid):
            raise ValueError("pyramids have different numbers of scales")
        for a, b in zip(rgb_pyramid, depth_pyramid):
            if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
                raise ValueError(f"pyramid shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    target = rgb_pyramid[-1].shape[-2:]
    parts = []
    for i, rgb in enumerate(rgb_pyramid):
        level = [rgb] if depth_pyramid is None else [rgb, depth_pyramid[i]]
        for f in level:
            factor = f.shape[-1] // target[-1]
            parts.append(F.avg_pool2d(f, factor) if factor > 1 else f)
    return attention(projection(torch.cat(parts, dim=1)))


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def gates(self, x):
        return torch.sigmoid(self.fc2(F.silu(self.fc1(x.mean(dim=(2, 3), keepdim=True)))))

    def forward(self, x):
        return x * self.gates(x)


class BottleneckBlock(nn.Module):
    """Timestep-modulated 1x1 / 3x3 / 1x1 bottleneck, SE attention, scaled residual."""

    def __init__(self, channels: int, emb_dim: int, reduction: int = 4, residual_init: float = 1.0):
        super().__init__()
        mid = max(channels // 4, 1)
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.film = nn.Linear(emb_dim, 2 * channels)
        self.conv1 = nn.Conv2d(channels, mid, 1)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.conv3 = nn.Conv2d(mid, channels, 1)
        self.se = SqueezeExcite(channels, reduction)
        self.gamma = nn.Parameter(torch.full((), float(residual_init)))

    def branch(self, h, emb):
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        y = self.norm(h) * (1 + scale) + shift
        y = self.conv3(F.silu(self.conv2(F.silu(self.conv1(F.silu(y))))))
        return self.se(y)

    def forward(self, h, emb):
        return h + self.gamma * self.branch(h, emb)


class ConditionalDenoiser(nn.Module):
    def __init__(self, latent_channels: int = 4, channels: int = 64, blocks: int = 4,
                 feat_channels=(16, 32, 64), cond_channels: int = 64, time_dim: int = 64,
                 se_reduction: int = 4, residual_init: float = 1.0, condition_mode: str = "refined"):
        super().__init__()
        if condition_mode not in ("refined", "rgb_only"):
            raise ValueError(f"unknown condition mode {condition_mode!r}")
        self.condition_mode = condition_mode
        self.latent_channels = latent_channels
        self.time_dim = time_dim
        self.rgb_features = MultiScaleExtractor(3, feat_channels)
        self.depth_features = MultiScaleExtractor(1, feat_channels) if condition_mode == "refined" else None
        n_in = sum(feat_channels) * (2 if condition_mode == "refined" else 1)
        self.fusion = nn.Conv2d(n_in, cond_channels, 1)
        self.attention = SpatialSelfAttention(cond_channels)
        self.time_embed = nn.Sequential(nn.Linear(time_dim, channels), nn.SiLU(), nn.Linear(channels, channels))
        self.stem = nn.Conv2d(latent_channels + cond_channels, channels, 1)
        self.blocks = nn.ModuleList(
            [BottleneckBlock(channels, channels, se_reduction, residual_init) for _ in range(blocks)]
        )
        self.head = nn.Sequential(nn.GroupNorm(_groups(channels), channels), nn.SiLU(),
                                  nn.Conv2d(channels, latent_channels, 1))

    @classmethod
    def from_config(cls, cfg, latent_channels: int) -> "ConditionalDenoiser":
        return cls(latent_channels, cfg.channels, cfg.blocks, tuple(cfg.feat_channels), cfg.cond_channels,
                   cfg.time_dim, cfg.se_reduction, cfg.residual_init, cfg.condition_mode)

    def condition(self, rgb, depth=None):
        """Visual condition (B, C, H/4, W/4) from RGB and normalised refined depth."""
        rgb_pyr = self.rgb_features(rgb)
        depth_pyr = None
        if self.depth_features is not None:
            if depth is None:
                raise ValueError("refined-depth conditioning needs a depth input")
            depth_pyr = self.depth_features(depth)
        return fuse_features(rgb_pyr, depth_pyr, self.fusion, self.attention)

    def embed(self, x_t, t, c):
        """Stem output plus broadcast timestep embedding; also returns the embedding."""
        if x_t.shape[-2:] != c.shape[-2:] or x_t.shape[0] != c.shape[0]:
            raise ValueError(f"latent {tuple(x_t.shape)} and condition {tuple(c.shape)} are not aligned")
        if x_t.shape[1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {x_t.shape[1]}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and x_t.shape[0] > 1:
            t = t.expand(x_t.shape[0])
        emb = self.time_embed(timestep_embedding(t, self.time_dim).to(x_t.dtype))
        h = self.stem(torch.cat([x_t, c], dim=1)) + emb[:, :, None, None]
        return h, emb

    def predict(self, x_t, t, c):
        """x_0 estimate from the noisy latent, timestep and visual condition."""
        h, emb = self.embed(x_t, t, c)
        for block in self.blocks:
            h = block(h, emb)
        return self.head(h)

    def forward(self, x_t, t, rgb, depth=None):
        return self.predict(x_t, t, self.condition(rgb, depth))

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {}
        for name, p in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append((name, p))
        return groups


def predict(x_t, t: int, c, model: ConditionalDenoiser, T: int | None = None):
    """Functional wrapper with timestep range checking."""
    tt = np.asarray(t)
    if T is not None and (tt.min() < 0 or tt.max() >= T):
        raise ValueError(f"timestep {t} outside [0, {T - 1}]")
    return model.predict(x_t, torch.as_tensor(tt, dtype=torch.long), c)


def denoiser_state(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
