"""The end-to-end toy experiment, driven through the command line.

Every stage writes into its own sub-directory of ``root`` and is skipped when
a previous run with the same resolved configuration already produced its
outputs, so a second invocation only re-reads results.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from . import cli
from .config import dump_config, load_config

log = logging.getLogger(__name__)

STEP_COUNTS = (2, 5, 10)


def _stage(root: Path, name: str, argv: list[str], marker: str, cfg_text: str) -> float:
    """Run one CLI stage unless ``<root>/<name>/<marker>`` exists for the same config."""
    out = root / name
    stamp = out / "stage.cfg"
    if (out / marker).exists() and stamp.exists() and stamp.read_text() == cfg_text:
        log.info("stage %s cached", name)
        return 0.0
    start = time.time()
    code = cli.main([*argv, "--out", str(out)])
    if code != cli.EXIT_OK:
        raise RuntimeError(f"stage {name} exited with {code}")
    stamp.write_text(cfg_text)
    return time.time() - start


def _aggregate(path: Path) -> dict:
    return json.loads(path.read_text())["aggregate"]


def run_toy_experiment(root, overrides: dict[str, str] | None = None) -> dict:
    """Run (or resume) the full experiment and return a summary of its metrics."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = load_config(None, overrides or {})
    conf = root / "experiment.txt"
    text = dump_config(cfg)
    conf.write_text(text)
    c = ["--config", str(conf)]
    data, prep = str(root / "data"), str(root / "prep")
    codec, denoiser = str(root / "codec" / "codec.ckpt"), str(root / "diffusion" / "denoiser.ckpt")
    dp = ["--data", data, "--prep", prep]
    seconds = {
        "gen-data": _stage(root, "data", ["gen-data", *c], "manifest.json", text),
        "preprocess": _stage(root, "prep", ["preprocess", *c, "--data", data], "manifest.json", text),
        "train-codec": _stage(root, "codec", ["train-codec", *c, *dp], "codec.ckpt", text),
        "train-diffusion": _stage(root, "diffusion", ["train-diffusion", *c, *dp, "--codec", codec],
                                  "denoiser.ckpt", text),
        "infer": _stage(root, "infer", ["infer", *c, *dp, "--codec", codec, "--denoiser", denoiser],
                        "pred", text),
    }
    for method in ("raw", "refined"):
        seconds[f"eval-{method}"] = _stage(root, f"eval_{method}", ["eval", *c, *dp, "--method", method],
                                           "benchmark.json", text)
    seconds["eval-diffusion"] = _stage(root, "eval_diffusion",
                                       ["eval", *c, *dp, "--pred", str(root / "infer" / "pred")],
                                       "benchmark.json", text)
    models = ["--codec", codec, "--denoiser", denoiser]
    counts = ",".join(str(n) for n in STEP_COUNTS)
    seconds["ablate-steps"] = _stage(root, "ablate_steps", ["ablate-steps", *c, *dp, *models, "--counts", counts],
                                     "steps.json", text)
    seconds["ablate-condition"] = _stage(root, "ablate_condition", ["ablate-condition", *c, *dp, *models],
                                         "condition.json", text)

    steps = json.loads((root / "ablate_steps" / "steps.json").read_text())
    cond = json.loads((root / "ablate_condition" / "condition.json").read_text())
    summary = {
        "raw": _aggregate(root / "eval_raw" / "benchmark.json"),
        "refined": _aggregate(root / "eval_refined" / "benchmark.json"),
        "diffusion": _aggregate(root / "eval_diffusion" / "benchmark.json"),
        "steps": steps,
        "condition": {("refined" if r["label"] == "Refined" else "rgb_only"): r for r in cond},
        "seconds": seconds,
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def step_degradations(steps: list[dict]) -> dict[str, dict[int, float]]:
    """RMSE increase over the baseline row, per mode and step count."""
    base = next(r for r in steps if r["mode"] == "baseline")["rmse"]
    out: dict[str, dict[int, float]] = {}
    for r in steps:
        if r["mode"] != "baseline":
            out.setdefault(r["mode"], {})[r["count"]] = r["rmse"] - base
    return out

