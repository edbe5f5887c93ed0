"""Depth autoencoder between image-resolution depth and the diffusion latent."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .geometry import DepthMap


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class DepthNormalization:
    d_min: float = 0.2
    d_max: float = 2.0

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")

    def normalize(self, depth):
        return (depth - self.d_min) / (self.d_max - self.d_min)

    def denormalize(self, x):
        return x * (self.d_max - self.d_min) + self.d_min


class DepthCodec(nn.Module):
    """Strided conv encoder (x4 down) and a 1x1-conv / 3x3-deconv / sigmoid decoder.

    Latents are standardised with ``latent_shift`` and ``latent_scale`` so the
    diffusion model sees roughly unit-variance inputs.
    """

    def __init__(self, latent_channels: int = 4, hidden: int = 32):
        super().__init__()
        h = hidden
        self.encoder = nn.Sequential(
            nn.Conv2d(3, h, 3, padding=1), nn.SiLU(),
            nn.Conv2d(h, h, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(h, 2 * h, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * h, 2 * h, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * h, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * h, 1), nn.SiLU(),
            nn.Conv2d(2 * h, 2 * h, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(2 * h, h, 3, stride=2, padding=1, output_padding=1), nn.SiLU(),
            nn.Conv2d(h, h, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(h, 3, 3, stride=2, padding=1, output_padding=1),
        )
        self.register_buffer("latent_shift", torch.zeros(latent_channels))
        self.register_buffer("latent_scale", torch.ones(()))
        self.latent_channels = latent_channels
        self.hidden = hidden

    @staticmethod
    def replicate(x):
        """(B, 1, H, W) normalised depth -> (B, 3, H, W) pseudo-RGB."""
        return x.expand(-1, 3, -1, -1)

    def encode_raw(self, x):
        return self.encoder(self.replicate(x))

    def standardize(self, z):
        return (z - self.latent_shift[None, :, None, None]) * self.latent_scale

    def unstandardize(self, z):
        return z / self.latent_scale + self.latent_shift[None, :, None, None]

    def encode_normalized(self, x):
        return self.standardize(self.encode_raw(x))

    def decode_channels(self, latent):
        """Three sigmoid channels in (0, 1), shape (B, 3, H, W)."""
        return torch.sigmoid(self.decoder(self.unstandardize(latent)))

    def decode_normalized(self, latent):
        return self.decode_channels(latent).mean(dim=1, keepdim=True)


def _check_divisible(shape):
    if shape[0] % 4 or shape[1] % 4:
        raise ValueError(f"depth shape {shape} is not divisible by 4; pad to a multiple of 4")


def normalize_checked(values, norm: DepthNormalization, tol: float = 0.05):
    x = norm.normalize(np.asarray(values, dtype=np.float64))
    if x.min() < -tol or x.max() > 1 + tol:
        raise RangeError(
            f"depth range [{np.min(values):.3f}, {np.max(values):.3f}] m falls outside the configured "
            f"normalisation [{norm.d_min}, {norm.d_max}] m"
        )
    return x


def encode(depth: DepthMap, norm: DepthNormalization, codec: DepthCodec) -> np.ndarray:
    """Depth map -> latent array (D, H/4, W/4)."""
    if not depth.validity.all():
        raise ValueError("encode needs a complete depth map (invalid pixels present)")
    _check_divisible(depth.shape)
    x = normalize_checked(depth.values, norm)
    p = next(codec.parameters())
    with torch.no_grad():
        z = codec.encode_normalized(torch.as_tensor(x, dtype=p.dtype)[None, None])
    return z[0].numpy()


def decode(latent, norm: DepthNormalization, codec: DepthCodec) -> DepthMap:
    """Latent (D, h, w) -> complete depth map (4h, 4w) in metres."""
    latent = np.asarray(latent)
    if latent.ndim != 3 or latent.shape[0] != codec.latent_channels:
        raise ValueError(f"latent shape {latent.shape} does not match {codec.latent_channels} channels")
    p = next(codec.parameters())
    with torch.no_grad():
        x = codec.decode_normalized(torch.as_tensor(latent, dtype=p.dtype)[None])
    return DepthMap.complete(norm.denormalize(x[0, 0].double().numpy()))


def pixel_loss(pred, gt, lam: float = 0.5):
    """sqrt(mean(d^2) + lam * mean(d)^2) over all pixels, d = pred - gt.

    Accepts numpy arrays, torch tensors, or DepthMaps (values are used as-is,
    so pass normalised depth).
    """
    if isinstance(pred, DepthMap):
        pred = pred.values
    if isinstance(gt, DepthMap):
        gt = gt.values
    if tuple(pred.shape) != tuple(gt.shape):
        raise ValueError("pred and gt shapes differ")
    n = math.prod(pred.shape)
    if n == 0:
        raise ValueError("pixel_loss of an empty input")
    d = pred - gt
    if isinstance(d, torch.Tensor):
        return torch.sqrt((d * d).sum() / n + lam * d.sum() ** 2 / n**2)
    d = np.asarray(d, dtype=np.float64)
    return float(np.sqrt((d * d).sum() / n + lam * d.sum() ** 2 / n**2))


def pixel_loss_grad(pred, gt, lam: float = 0.5) -> np.ndarray:
    """Closed-form gradient of :func:`pixel_loss` with respect to ``pred``."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    n = d.size
    loss = np.sqrt((d * d).sum() / n + lam * d.sum() ** 2 / n**2)
    return (d / n + lam * d.sum() / n**2) / loss


def batch_pixel_loss(pred, gt, lam: float = 0.5, eps: float = 1e-12):
    """Mean over the batch of per-sample pixel losses, for (B, ...) tensors."""
    d = (pred - gt).flatten(1)
    n = d.shape[1]
    inner = (d * d).sum(1) / n + lam * d.sum(1) ** 2 / n**2
    return torch.sqrt(inner.clamp_min(eps)).mean()


def codec_state(codec: DepthCodec) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in codec.state_dict().items()}


def codec_from_state(tensors: dict, latent_channels: int, hidden: int) -> DepthCodec:
    codec = DepthCodec(latent_channels, hidden)
    load_state_strict(codec, tensors)
    return codec


def load_state_strict(module: nn.Module, tensors: dict) -> None:
    """Load numpy tensors, requiring identical names and shapes."""
    own = module.state_dict()
    if set(own) != set(tensors):
        missing, extra = sorted(set(own) - set(tensors)), sorted(set(tensors) - set(own))
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for k, v in own.items():
        if tuple(v.shape) != tuple(np.shape(tensors[k])):
            raise ValueError(f"checkpoint shape mismatch for {k}: {tuple(np.shape(tensors[k]))} vs {tuple(v.shape)}")
    module.load_state_dict({k: torch.as_tensor(np.asarray(tensors[k]), dtype=own[k].dtype) for k in own})


def latent_statistics(codec: DepthCodec, batches) -> None:
    """Set the standardisation buffers from raw latents of ``batches``."""
    with torch.no_grad():
        zs = torch.cat([codec.encode_raw(b) for b in batches])
        codec.latent_shift.copy_(zs.mean(dim=(0, 2, 3)))
        centered = zs - codec.latent_shift[None, :, None, None]
        codec.latent_scale.copy_(1.0 / centered.std().clamp_min(1e-6))
