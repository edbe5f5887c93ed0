"""Experiment configuration.

All settings live in nested dataclasses and are exchanged as a flat
``section.key = value`` text file. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class GeometryConfig:
    w_obs: float = 1000.0
    w_normal: float = 1.0
    w_smooth: float = 1.0
    boundary_threshold: float = 0.02
    # smoothness/normal edges never drop fully to zero, so that cut-off
    # regions without observations still have a unique minimizer
    boundary_floor: float = 1e-3
    # residual 1e-8 leaves ~1e-3 relative solution error on badly conditioned
    # scenes (floor-weighted edges); 1e-12 is cheap and accurate to ~1e-9
    cg_tol: float = 1e-12
    cg_maxiter_factor: float = 10.0


@dataclass
class SynthSpec:
    height: int = 48
    width: int = 64
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    min_objects: int = 1
    max_objects: int = 5
    focal: float = 55.0
    table_distance_min: float = 0.5
    table_distance_max: float = 0.8
    table_tilt_max_deg: float = 35.0
    object_radius_min: float = 0.04
    object_radius_max: float = 0.10
    transparent_prob: float = 0.7
    hole_prob: float = 0.35
    leak_prob: float = 0.35
    noise_sigma: float = 0.01
    refraction_offset: int = 3
    seed: int = 0


@dataclass
class CodecConfig:
    d_min: float = 0.2
    d_max: float = 2.0
    latent_channels: int = 4
    hidden: int = 32
    pixel_lambda: float = 0.5
    latent_reg: float = 1e-3
    epochs: int = 60
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 0


@dataclass
class DenoiserConfig:
    channels: int = 64
    blocks: int = 4
    feat_channels: tuple[int, int, int] = (16, 32, 64)
    cond_channels: int = 64
    time_dim: int = 64
    se_reduction: int = 4
    residual_init: float = 1.0
    condition_mode: str = "refined"


@dataclass
class TrainConfig:
    inference_count: int = 20
    train_on_plan: bool = False
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    lr: float = 2e-4
    weight_decay: float = 0.0
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    log_every: int = 10


@dataclass
class EvalConfig:
    scope: str = "transparent_only"
    aggregate: str = "pixel"
    seed: int = 0


@dataclass
class ExperimentConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.schedule.T < 1:
            raise ConfigError("schedule.T must be >= 1")
        if not 0 < self.schedule.beta_start <= self.schedule.beta_end < 1:
            raise ConfigError("need 0 < schedule.beta_start <= schedule.beta_end < 1")
        if not 1 <= self.train.inference_count <= self.schedule.T:
            raise ConfigError("train.inference_count must lie in [1, schedule.T]")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self.train, name) < 0:
                raise ConfigError(f"train.{name} must be non-negative")
        if self.data.height % 4 or self.data.width % 4:
            raise ConfigError("data.height and data.width must be divisible by 4")
        if not self.codec.d_min < self.codec.d_max:
            raise ConfigError("codec.d_min must be below codec.d_max")
        if self.denoiser.condition_mode not in ("refined", "rgb_only"):
            raise ConfigError("denoiser.condition_mode must be 'refined' or 'rgb_only'")
        if self.eval.scope not in ("transparent_only", "all_pixels"):
            raise ConfigError("eval.scope must be 'transparent_only' or 'all_pixels'")
        if self.eval.aggregate not in ("pixel", "sample"):
            raise ConfigError("eval.aggregate must be 'pixel' or 'sample'")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(type(default[0])(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def to_flat(cfg: ExperimentConfig) -> dict[str, Any]:
    flat = {}
    for section in dataclasses.fields(cfg):
        sub = getattr(cfg, section.name)
        for f in dataclasses.fields(sub):
            flat[f"{section.name}.{f.name}"] = getattr(sub, f.name)
    return flat


def valid_keys() -> list[str]:
    return list(to_flat(ExperimentConfig()))


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with string-valued ``section.key`` overrides applied."""
    cfg = dataclasses.replace(
        cfg, **{s.name: dataclasses.replace(getattr(cfg, s.name)) for s in dataclasses.fields(cfg)}
    )
    flat = to_flat(cfg)
    for key, raw in overrides.items():
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(flat)}")
        section, name = key.split(".", 1)
        setattr(getattr(cfg, section), name, _parse(str(raw), flat[key], key))
    cfg.validate()
    return cfg


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_overrides(items: list[str]) -> dict[str, str]:
    pairs = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs = parse_text(Path(path).read_text()) if path else {}
    pairs.update(overrides or {})
    return apply_overrides(ExperimentConfig(), pairs)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in to_flat(cfg).items())


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))


def section_hash(cfg: ExperimentConfig, *sections: str) -> str:
    """Short digest of the named sections, used to key cached artifacts."""
    flat = to_flat(cfg)
    text = "".join(f"{k}={_format(v)}\n" for k, v in flat.items() if k.split(".")[0] in sections)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def to_flat_json(cfg: ExperimentConfig) -> dict[str, str]:
    """Flat mapping of every key to its text form (stored inside checkpoints)."""
    return {k: _format(v) for k, v in to_flat(cfg).items()}


def from_flat_json(flat: dict[str, str]) -> ExperimentConfig:
    known = set(valid_keys())
    return apply_overrides(ExperimentConfig(), {k: v for k, v in flat.items() if k in known})
