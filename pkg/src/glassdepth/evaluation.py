"""Depth-completion metrics, benchmark protocol and ablation runners.

Report schema (``report.json``)::

    {"scope": "transparent_only" | "all_pixels",
     "aggregate": {"rmse", "rel", "mae", "delta_105", "delta_110", "delta_125",
                   "pixel_count", "mask_scope"},
     "samples": [{"id": str, <same metric keys>}, ...],
     "failures": [{"id": str, "error": str}, ...],
     "failed_fraction": float}

RMSE and MAE are in metres, REL is dimensionless, deltas are percentages.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DepthMap

log = logging.getLogger(__name__)

THRESHOLDS = (1.05, 1.10, 1.25)
SCOPES = ("transparent_only", "all_pixels")
COLUMNS = ("rmse", "rel", "mae", "delta_105", "delta_110", "delta_125")
HEADERS = {"rmse": "RMSE", "rel": "REL", "mae": "MAE", "delta_105": "d1.05", "delta_110": "d1.10", "delta_125": "d1.25"}
ABLATION_COLUMNS = ("rel", "rmse", "mae", "delta_105", "delta_110", "delta_125")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    rel: float
    mae: float
    delta_105: float
    delta_110: float
    delta_125: float
    pixel_count: int
    mask_scope: str

    def __post_init__(self):
        d = (self.delta_105, self.delta_110, self.delta_125)
        if not all(0.0 <= x <= 100.0 for x in d):
            raise EvaluationError(f"delta accuracies out of [0, 100]: {d}")
        if not d[0] <= d[1] <= d[2]:
            raise EvaluationError(f"delta accuracies not monotone: {d}")
        if not (self.mae >= 0 and self.rmse >= self.mae * (1 - 1e-12)):
            raise EvaluationError(f"expected rmse >= mae >= 0, got rmse={self.rmse}, mae={self.mae}")
        if self.mask_scope not in SCOPES:
            raise EvaluationError(f"unknown scope {self.mask_scope!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def _values(x):
    return x.filled(0.0) if isinstance(x, DepthMap) else np.asarray(x, dtype=np.float64)


def scope_mask(mask, shape, scope: str) -> np.ndarray:
    if scope == "transparent_only":
        return np.asarray(mask, dtype=bool)
    if scope == "all_pixels":
        return np.ones(shape, dtype=bool)
    raise EvaluationError(f"unknown scope {scope!r}; expected one of {SCOPES}")


def compute_metrics(pred, gt, mask, scope: str = "transparent_only") -> MetricsReport:
    """Metrics over the scoped pixels. Invalid predictions count as depth 0."""
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape or np.shape(mask) != g.shape:
        raise EvaluationError(f"shape mismatch: pred {p.shape}, gt {g.shape}, mask {np.shape(mask)}")
    sel = scope_mask(mask, g.shape, scope)
    if not sel.any():
        raise EvaluationError("evaluation scope is empty")
    p, g = p[sel], g[sel]
    if np.any(g <= 0):
        raise EvaluationError("ground truth must be positive on every evaluated pixel")
    err = p - g
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    n = int(g.size)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(err * err))),
        rel=float(np.mean(np.abs(err) / g)),
        mae=float(np.mean(np.abs(err))),
        delta_105=float(100.0 * np.mean(ratio < THRESHOLDS[0])),
        delta_110=float(100.0 * np.mean(ratio < THRESHOLDS[1])),
        delta_125=float(100.0 * np.mean(ratio < THRESHOLDS[2])),
        pixel_count=n,
        mask_scope=scope,
    )


def aggregate(reports: list[MetricsReport], mode: str = "pixel") -> MetricsReport:
    """Combine per-sample reports: pixel-weighted (default) or per-sample mean."""
    if not reports:
        raise EvaluationError("nothing to aggregate")
    scopes = {r.mask_scope for r in reports}
    if len(scopes) != 1:
        raise EvaluationError(f"cannot mix scopes {sorted(scopes)}")
    n = np.array([r.pixel_count for r in reports], dtype=np.float64)
    if mode == "pixel":
        w = n / n.sum()
        rmse = math.sqrt(float(np.sum(w * np.array([r.rmse**2 for r in reports]))))
    elif mode == "sample":
        w = np.full(len(reports), 1.0 / len(reports))
        rmse = float(np.sum(w * np.array([r.rmse for r in reports])))
    else:
        raise EvaluationError(f"unknown aggregation {mode!r}")
    mean = lambda key: float(np.sum(w * np.array([getattr(r, key) for r in reports])))
    # weighted means of percentages can round a hair past 100
    pct = lambda key: min(max(mean(key), 0.0), 100.0)
    return MetricsReport(rmse, mean("rel"), mean("mae"), pct("delta_105"), pct("delta_110"),
                         pct("delta_125"), int(n.sum()), scopes.pop())


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchmarkResult:
    aggregate: MetricsReport
    samples: list[tuple[str, MetricsReport]]
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def failed_fraction(self) -> float:
        total = len(self.samples) + len(self.failures)
        return len(self.failures) / total if total else 0.0

    def to_json(self) -> dict:
        return {
            "scope": self.aggregate.mask_scope,
            "aggregate": self.aggregate.as_dict(),
            "samples": [{"id": sid, **r.as_dict()} for sid, r in self.samples],
            "failures": [{"id": sid, "error": err} for sid, err in self.failures],
            "failed_fraction": self.failed_fraction,
        }


def _predict_robust(pipeline, split):
    """Batch prediction; on failure fall back to per-sample calls to isolate bad samples."""
    try:
        preds = pipeline(split)
        return list(preds), []
    except Exception as exc:
        log.warning("batch prediction failed (%s); retrying per sample", exc)
    preds, failures = [], []
    for i, sid in enumerate(split.ids):
        try:
            preds.append(pipeline(split.subset([i]))[0])
        except Exception as exc:
            preds.append(None)
            failures.append((sid, f"{type(exc).__name__}: {exc}"))
    return preds, failures


def run_benchmark(split, pipeline, scope: str = "transparent_only", mode: str = "pixel",
                  out_dir=None, name: str = "benchmark") -> BenchmarkResult:
    """Evaluate ``pipeline(split) -> (N, H, W)`` predictions against ground truth.

    Failing samples are recorded and excluded from the aggregate.
    """
    if len(split) == 0:
        raise EvaluationError("empty split")
    preds, failures = _predict_robust(pipeline, split)
    samples = []
    for i, sid in enumerate(split.ids):
        if preds[i] is None:
            continue
        try:
            samples.append((sid, compute_metrics(preds[i], split.gt[i], split.mask[i], scope)))
        except Exception as exc:
            failures.append((sid, f"{type(exc).__name__}: {exc}"))
    if not samples:
        raise EvaluationError("every sample failed: " + "; ".join(f"{s}: {e}" for s, e in failures[:5]))
    result = BenchmarkResult(aggregate([r for _, r in samples], mode), samples, failures)
    if out_dir is not None:
        write_report(result, out_dir, name)
    return result


def write_report(result: BenchmarkResult, out_dir, name: str = "benchmark") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(result.to_json(), indent=2) + "\n")
    (out / f"{name}.txt").write_text(format_table([(name, result.aggregate)]))


def format_table(rows, columns=COLUMNS, title: str | None = None) -> str:
    """Aligned plain-text table; ``rows`` is a list of ``(label, report)`` or section strings."""
    labels = [r[0] for r in rows if not isinstance(r, str)]
    width = max([len("Method")] + [len(s) for s in labels])
    head = f"{'Method':<{width}} | " + " ".join(f"{HEADERS[c]:>8}" for c in columns)
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for row in rows:
        if isinstance(row, str):
            lines.append(f"-- {row}")
            continue
        label, rep = row
        cells = []
        for c in columns:
            v = getattr(rep, c)
            cells.append(f"{v:8.2f}" if c.startswith("delta") else f"{v:8.4f}")
        lines.append(f"{label:<{width}} | " + " ".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- pipelines


def raw_pipeline(split):
    return split.raw


def refined_pipeline(split):
    return split.refined


def oracle_pipeline(split):
    return split.gt


# ---------------------------------------------------------------- ablations


@dataclass
class AblationRow:
    label: str
    count: int | None
    mode: str
    report: MetricsReport


def ablate_inference_steps(split, codec, base_model, cfg, counts, modes=("reuse", "retrain"),
                           retrain_models: dict | None = None, seed: int = 0,
                           scope: str = "transparent_only") -> list[AblationRow]:
    """Rows per (count, mode): ``reuse`` runs the base checkpoint with a shorter plan,
    ``retrain`` uses a checkpoint trained on that plan."""
    from .scheduler import make_timestep_plan
    from .training import DiffusionPipeline

    retrain_models = retrain_models or {}
    unknown = set(modes) - {"reuse", "retrain"}
    if unknown:
        raise EvaluationError(f"unknown ablation modes {sorted(unknown)}")
    if "retrain" in modes:
        missing = [c for c in counts if c not in retrain_models]
        if missing:
            raise EvaluationError(f"no retrained checkpoint for inference counts {missing}")

    def bench(model, model_cfg, count):
        plan = make_timestep_plan(model_cfg.schedule.T, count)
        pipe = DiffusionPipeline(codec, model, model_cfg, plan, seed)
        return run_benchmark(split, pipe.predict_split, scope).aggregate

    rows = []
    for mode in modes:
        for count in counts:
            if mode == "reuse":
                rep = bench(base_model, cfg, count)
            else:
                model, model_cfg = retrain_models[count]
                rep = bench(model, model_cfg, count)
            rows.append(AblationRow(f"t={count}", count, mode, rep))
    return rows


def format_steps_table(baseline: AblationRow, rows: list[AblationRow]) -> str:
    out = [(baseline.label, baseline.report)]
    for mode, header in (("reuse", "Directly change inference without training."),
                         ("retrain", "Train with different inference steps.")):
        sel = [r for r in rows if r.mode == mode]
        if sel:
            out.append(header)
            out += [(r.label, r.report) for r in sel]
    return format_table(out, ABLATION_COLUMNS)


CONDITION_KEY = "denoiser.condition_mode"


def check_condition_pair(cfg_refined, cfg_rgb) -> None:
    from .config import to_flat

    a, b = to_flat(cfg_refined), to_flat(cfg_rgb)
    diff = sorted(k for k in a if k != CONDITION_KEY and a[k] != b[k])
    if diff:
        raise EvaluationError(f"condition ablation checkpoints differ beyond conditioning: {diff}")


def ablate_condition(split, codec, variants: dict, seed: int = 0, scope: str = "transparent_only",
                     count: int | None = None) -> list[AblationRow]:
    """``variants`` maps ``"refined"`` and ``"rgb_only"`` to ``(model, cfg)`` pairs."""
    from .scheduler import make_timestep_plan
    from .training import DiffusionPipeline

    if set(variants) != {"refined", "rgb_only"}:
        raise EvaluationError("condition ablation needs exactly 'refined' and 'rgb_only' variants")
    check_condition_pair(variants["refined"][1], variants["rgb_only"][1])
    rows = []
    for key, label in (("refined", "Refined"), ("rgb_only", "only-rgb")):
        model, model_cfg = variants[key]
        plan = make_timestep_plan(model_cfg.schedule.T, count or model_cfg.train.inference_count)
        pipe = DiffusionPipeline(codec, model, model_cfg, plan, seed)
        rows.append(AblationRow(label, plan.count, key, run_benchmark(split, pipe.predict_split, scope).aggregate))
    return rows


def format_condition_table(rows: list[AblationRow], dataset: str = "Synthetic") -> str:
    return format_table([f"{dataset} Dataset"] + [(r.label, r.report) for r in rows], ABLATION_COLUMNS)
