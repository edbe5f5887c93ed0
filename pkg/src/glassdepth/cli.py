"""Command-line entry point: ``glassdepth <subcommand> [options]``.

Every subcommand that produces artifacts writes them under ``--out``, next to
``config.txt`` (the fully resolved configuration), ``command.txt`` (argv) and
``run.log``. See :func:`reference_markdown` for the generated flag reference.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("glassdepth")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4
EXIT_SAMPLES = 5
EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_CONFIG: "configuration or command-line error (bad file, unknown key, unparsable value, mismatched checkpoints)",
    EXIT_MISSING: "missing or unreadable input (data directory, split, checkpoint or prediction file)",
    EXIT_NUMERICAL: "numerical failure (non-finite loss, solver breakdown, out-of-range depth)",
    EXIT_SAMPLES: "more than 1% of evaluated samples failed (or none could be scored)",
}
FAILED_FRACTION_LIMIT = 0.01

# which config key --seed sets, per subcommand
SEED_KEYS = {
    "gen-data": "data.seed",
    "train-codec": "codec.seed",
    "train-diffusion": "train.seed",
    "infer": "eval.seed",
    "eval": "eval.seed",
    "ablate-steps": "eval.seed",
    "ablate-condition": "eval.seed",
}

ARTIFACTS = {
    "gen-data": "<out>/{train,val,test}/<id>/{rgb.png,depth_raw.png,depth_gt.png,mask.png,meta.txt}, <out>/manifest.json",
    "preprocess": "<out>/refined/<split>/<id>.dpf, <out>/manifest.json",
    "train-codec": "<out>/codec.ckpt, <out>/codec_log.jsonl, <out>/metrics.json",
    "train-diffusion": "<out>/denoiser.ckpt, <out>/train_log.jsonl, <out>/loss.png",
    "infer": "<out>/pred/<id>.png (16-bit mm), <out>/pred/<id>.dpf (float32 m)",
    "eval": "<out>/<name>.json (report schema in glassdepth.evaluation), <out>/<name>.txt",
    "ablate-steps": "<out>/steps.txt, <out>/steps.json, <out>/steps.png, <out>/retrain_t<count>/denoiser.ckpt",
    "ablate-condition": "<out>/condition.txt, <out>/condition.json, <out>/rgb_only/denoiser.ckpt",
    "plot": "<out>/steps.png and/or <out>/samples/<id>.png",
    "show-config": "stdout only",
}


class MissingInput(FileNotFoundError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glassdepth", description="Transparent-object depth completion pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    def add(name, help_text, out=True, seed=True):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int, help=f"shortcut for --set {SEED_KEYS.get(name, 'eval.seed')}=N")
        if out:
            sp.add_argument("--out", type=Path, required=True, help="run directory for all outputs")
        return sp

    add("show-config", "Print every configuration key with its resolved value.", out=False, seed=False)

    add("gen-data", "Render the synthetic corpus.")

    sp = add("preprocess", "Run the global depth solve on every split and cache the refined depth.", seed=False)
    sp.add_argument("--data", type=Path, required=True)

    sp = add("train-codec", "Train and freeze the depth autoencoder.")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--prep", type=Path, help="preprocess run directory (refined depth cache)")

    sp = add("train-diffusion", "Train the conditioned denoiser against a frozen codec.")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--codec", type=Path, required=True, help="codec.ckpt")
    sp.add_argument("--prep", type=Path)
    sp.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")

    sp = add("infer", "Complete depth for a split with DDIM sampling.")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--codec", type=Path, required=True)
    sp.add_argument("--denoiser", type=Path, required=True)
    sp.add_argument("--prep", type=Path)
    sp.add_argument("--steps", type=int, help="inference step count (default: the checkpoint's train.inference_count)")

    sp = add("eval", "Score predictions (or a baseline) against ground truth.")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="test")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred", type=Path, help="directory of <id>.dpf (or <id>.png) predictions")
    src.add_argument("--method", choices=("raw", "refined", "gt"), help="built-in baseline")
    sp.add_argument("--prep", type=Path)
    sp.add_argument("--name", default="benchmark", help="report file stem")

    sp = add("ablate-steps", "Inference-step ablation: reuse the base checkpoint vs retrain on each plan.")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--codec", type=Path, required=True)
    sp.add_argument("--denoiser", type=Path, required=True, help="base checkpoint")
    sp.add_argument("--counts", default="2,5,10", help="comma-separated step counts")
    sp.add_argument("--modes", default="reuse,retrain")
    sp.add_argument("--prep", type=Path)

    sp = add("ablate-condition", "Conditioning ablation: refined depth + RGB vs RGB only.")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--codec", type=Path, required=True)
    sp.add_argument("--denoiser", type=Path, required=True, help="checkpoint trained with refined conditioning")
    sp.add_argument("--rgb-only", type=Path, help="rgb-only checkpoint (trained into <out>/rgb_only if omitted)")
    sp.add_argument("--prep", type=Path)

    sp = add("plot", "Render figures from ablation results and predictions.", seed=False)
    sp.add_argument("--steps-json", type=Path, help="steps.json from ablate-steps")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--split", default="test")
    sp.add_argument("--pred", type=Path, help="prediction directory from infer")
    sp.add_argument("--prep", type=Path)
    sp.add_argument("--limit", type=int, default=4, help="number of sample panels")
    return p


# ----------------------------------------------------------------- helpers


def resolve_config(args) -> ExperimentConfig:
    overrides = config_mod.parse_overrides(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides[SEED_KEYS.get(args.command, "eval.seed")] = str(args.seed)
    if args.config is not None and not args.config.exists():
        raise MissingInput(f"config file {args.config} not found")
    return config_mod.load_config(args.config, overrides)


def start_run(out: Path, cfg: ExperimentConfig, argv) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out / "config.txt")
    (out / "command.txt").write_text(" ".join(["glassdepth", *argv]) + "\n")
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _require(path: Path, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise MissingInput(f"{what} {path} not found")
    return Path(path)


def load_samples(data: Path, split: str, cfg: ExperimentConfig):
    from .dataset import load_split

    root = _require(data, "data directory")
    if not (root / split).is_dir():
        raise MissingInput(f"split '{split}' not found under {root}")
    samples = load_split(root, split, cfg.geometry.boundary_threshold)
    if not samples:
        raise MissingInput(f"split '{split}' under {root} is empty")
    return samples


def read_prep(prep: Path, split: str, ids, cfg: ExperimentConfig) -> np.ndarray:
    from .io import read_float_array

    manifest = json.loads(_require(prep / "manifest.json", "preprocess manifest").read_text())
    want = config_mod.section_hash(cfg, "geometry")
    if manifest["geometry_hash"] != want:
        raise ConfigError(f"{prep} was preprocessed with different geometry settings")
    return np.stack([read_float_array(_require(prep / "refined" / split / f"{sid}.dpf", "refined depth"))
                     for sid in ids]).astype(np.float64)


def load_prepared(data: Path, split: str, cfg: ExperimentConfig, prep: Path | None = None):
    from .training import prepare_split

    samples = load_samples(data, split, cfg)
    refined = read_prep(prep, split, [s.id for s in samples], cfg) if prep is not None else None
    return prepare_split(samples, cfg, refined)


def _load_codec(path):
    from .training import load_codec

    return load_codec(_require(path, "codec checkpoint"))


def _load_denoiser(path):
    from .training import load_denoiser

    return load_denoiser(_require(path, "denoiser checkpoint"))


def _with_codec_section(cfg: ExperimentConfig, codec_cfg: ExperimentConfig) -> ExperimentConfig:
    """Take the codec section from the codec checkpoint so both stages agree."""
    flat = config_mod.to_flat(cfg)
    for key, value in config_mod.to_flat(codec_cfg).items():
        if key.startswith("codec.") and flat[key] != value:
            log.info("using %s = %s from the codec checkpoint", key, value)
    out = config_mod.apply_overrides(cfg, {})
    out.codec = codec_cfg.codec
    return out


def _counts(text: str) -> list[int]:
    try:
        counts = [int(c) for c in text.split(",") if c.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --counts {text!r}") from exc
    if not counts or min(counts) < 1:
        raise ConfigError("--counts needs positive integers")
    return counts


def _train_variant(train_split, codec, cfg, out: Path):
    """Train (or reuse an existing, config-identical) denoiser sub-run under ``out``."""
    from .training import load_denoiser, train_diffusion

    ckpt = out / "denoiser.ckpt"
    if ckpt.exists():
        model, saved = load_denoiser(ckpt)
        if config_mod.to_flat(saved) == config_mod.to_flat(cfg):
            log.info("reusing %s", ckpt)
            return model, saved
        log.info("%s was trained with a different config; retraining", ckpt)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, out / "config.txt")
    return train_diffusion(train_split, codec, cfg, out), cfg


# -------------------------------------------------------------- subcommands


def cmd_show_config(args, cfg):
    print(config_mod.dump_config(cfg), end="")


def cmd_gen_data(args, cfg):
    from .dataset import generate_corpus
    from .io import tree_digest

    parts = generate_corpus(cfg.data, args.out, cfg.geometry.boundary_threshold)
    digest = {name: tree_digest(args.out / name) for name in parts}
    manifest = {"splits": parts, "digest": digest, "data_hash": config_mod.section_hash(cfg, "data")}
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    for name, ids in parts.items():
        print(f"{name}: {len(ids)} samples  sha256 {digest[name][:16]}")


def cmd_preprocess(args, cfg):
    from .dataset import list_split
    from .io import write_float_array
    from .training import refine_samples

    root = _require(args.data, "data directory")
    splits = [s for s in ("train", "val", "test") if (root / s).is_dir()]
    if not splits:
        raise MissingInput(f"no splits under {root}")
    for name in splits:
        samples = load_samples(root, name, cfg)
        refined = refine_samples(samples, cfg)
        d = args.out / "refined" / name
        d.mkdir(parents=True, exist_ok=True)
        for s, r in zip(samples, refined):
            write_float_array(d / f"{s.id}.dpf", r)
        print(f"{name}: {len(samples)} refined")
    manifest = {"splits": splits, "geometry_hash": config_mod.section_hash(cfg, "geometry"),
                "data": str(root), "ids": {n: list_split(root, n) for n in splits}}
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def cmd_train_codec(args, cfg):
    from .training import codec_reconstruction_rmse, train_codec

    train = load_prepared(args.data, "train", cfg, args.prep)
    start = time.time()
    codec = train_codec(train, cfg, args.out)
    metrics = {"train_recon_rmse_norm": codec_reconstruction_rmse(codec, train), "seconds": time.time() - start}
    if (args.data / "val").is_dir():
        metrics["val_recon_rmse_norm"] = codec_reconstruction_rmse(codec, load_prepared(args.data, "val", cfg, args.prep))
    (args.out / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    print(json.dumps(metrics))


def cmd_train_diffusion(args, cfg):
    from .plotting import loss_curve
    from .training import train_diffusion

    codec, codec_cfg = _load_codec(args.codec)
    cfg = _with_codec_section(cfg, codec_cfg)
    config_mod.save_config(cfg, args.out / "config.txt")
    train = load_prepared(args.data, "train", cfg, args.prep)
    model = train_diffusion(train, codec, cfg, args.out, args.max_steps)
    loss_curve(model.train_log, args.out / "loss.png")
    print(f"final loss {model.train_log[-1]['loss']:.5f}")


def cmd_infer(args, cfg):
    from .geometry import DepthMap
    from .io import write_depth_png, write_float_array
    from .scheduler import make_timestep_plan
    from .training import DiffusionPipeline

    codec, _ = _load_codec(args.codec)
    model, model_cfg = _load_denoiser(args.denoiser)
    model_cfg.geometry = cfg.geometry
    model_cfg.eval = cfg.eval
    config_mod.save_config(model_cfg, args.out / "config.txt")
    split = load_prepared(args.data, args.split, model_cfg, args.prep)
    plan = make_timestep_plan(model_cfg.schedule.T, args.steps or model_cfg.train.inference_count)
    pred = DiffusionPipeline(codec, model, model_cfg, plan, model_cfg.eval.seed).predict_split(split)
    if not np.isfinite(pred).all():
        raise NumericalFailure("non-finite depth in predictions")
    d = args.out / "pred"
    d.mkdir(parents=True, exist_ok=True)
    for sid, p in zip(split.ids, pred):
        write_float_array(d / f"{sid}.dpf", p)
        write_depth_png(d / f"{sid}.png", DepthMap.complete(p))
    print(f"{len(split)} predictions with {plan.count} steps -> {d}")


def _read_prediction(pred_dir: Path, sid: str) -> np.ndarray:
    from .io import read_depth_png, read_float_array

    if (pred_dir / f"{sid}.dpf").exists():
        return read_float_array(pred_dir / f"{sid}.dpf").astype(np.float64)
    if (pred_dir / f"{sid}.png").exists():
        return read_depth_png(pred_dir / f"{sid}.png").filled(0.0)
    raise FileNotFoundError(f"no prediction for {sid} in {pred_dir}")


def cmd_eval(args, cfg):
    from .evaluation import format_table, oracle_pipeline, raw_pipeline, refined_pipeline, run_benchmark

    split = load_prepared(args.data, args.split, cfg, args.prep)
    if args.method is not None:
        pipeline = {"raw": raw_pipeline, "refined": refined_pipeline, "gt": oracle_pipeline}[args.method]
    else:
        pred_dir = _require(args.pred, "prediction directory")
        pipeline = lambda s: [_read_prediction(pred_dir, sid) for sid in s.ids]
    result = run_benchmark(split, pipeline, cfg.eval.scope, cfg.eval.aggregate, args.out, args.name)
    print(format_table([(args.method or args.name, result.aggregate)], title=f"scope: {cfg.eval.scope}"), end="")
    for sid, err in result.failures:
        log.error("sample %s failed: %s", sid, err)
    if result.failed_fraction > FAILED_FRACTION_LIMIT:
        print(f"{len(result.failures)} samples failed ({100 * result.failed_fraction:.1f}%)", file=sys.stderr)
        return EXIT_SAMPLES
    return EXIT_OK


def _rows_json(rows):
    return [{"label": r.label, "count": r.count, "mode": r.mode, **r.report.as_dict()} for r in rows]


def cmd_ablate_steps(args, cfg):
    from .evaluation import AblationRow, ablate_inference_steps, format_steps_table, run_benchmark
    from .plotting import error_vs_steps
    from .scheduler import make_timestep_plan
    from .training import DiffusionPipeline, with_overrides

    codec, _ = _load_codec(args.codec)
    base, base_cfg = _load_denoiser(args.denoiser)
    counts = _counts(args.counts)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    split = load_prepared(args.data, args.split, base_cfg, args.prep)
    seed, scope = cfg.eval.seed, cfg.eval.scope

    retrained = {}
    if "retrain" in modes:
        train = load_prepared(args.data, "train", base_cfg, args.prep)
        for c in counts:
            variant = with_overrides(base_cfg, train={"inference_count": c, "train_on_plan": True})
            retrained[c] = _train_variant(train, codec, variant, args.out / f"retrain_t{c}")
    n0 = base_cfg.train.inference_count
    pipe = DiffusionPipeline(codec, base, base_cfg, make_timestep_plan(base_cfg.schedule.T, n0), seed)
    baseline = AblationRow(f"t={n0}", n0, "baseline", run_benchmark(split, pipe.predict_split, scope).aggregate)
    rows = ablate_inference_steps(split, codec, base, base_cfg, counts, modes, retrained, seed, scope)
    table = format_steps_table(baseline, rows)
    (args.out / "steps.txt").write_text(table)
    (args.out / "steps.json").write_text(json.dumps(_rows_json([baseline] + rows), indent=1) + "\n")
    error_vs_steps(rows + [AblationRow(baseline.label, n0, m, baseline.report) for m in modes], args.out / "steps.png")
    print(table, end="")


def cmd_ablate_condition(args, cfg):
    from .evaluation import ablate_condition, format_condition_table
    from .training import with_overrides

    codec, _ = _load_codec(args.codec)
    model, model_cfg = _load_denoiser(args.denoiser)
    if model_cfg.denoiser.condition_mode != "refined":
        raise ConfigError(f"{args.denoiser} is not a refined-condition checkpoint")
    if args.rgb_only is not None:
        rgb = _load_denoiser(args.rgb_only)
    else:
        train = load_prepared(args.data, "train", model_cfg, args.prep)
        variant = with_overrides(model_cfg, denoiser={"condition_mode": "rgb_only"})
        rgb = _train_variant(train, codec, variant, args.out / "rgb_only")
    split = load_prepared(args.data, args.split, model_cfg, args.prep)
    rows = ablate_condition(split, codec, {"refined": (model, model_cfg), "rgb_only": rgb},
                            cfg.eval.seed, cfg.eval.scope)
    table = format_condition_table(rows)
    (args.out / "condition.txt").write_text(table)
    (args.out / "condition.json").write_text(json.dumps(_rows_json(rows), indent=1) + "\n")
    print(table, end="")


def cmd_plot(args, cfg):
    from .evaluation import AblationRow, MetricsReport
    from .plotting import depth_panel, error_vs_steps

    made = 0
    if args.steps_json is not None:
        entries = json.loads(_require(args.steps_json, "steps.json").read_text())
        keys = MetricsReport.__dataclass_fields__
        rows = [AblationRow(e["label"], e["count"], e["mode"], MetricsReport(**{k: e[k] for k in keys}))
                for e in entries if e["mode"] != "baseline"]
        error_vs_steps(rows, args.out / "steps.png")
        made += 1
    if args.pred is not None:
        if args.data is None:
            raise ConfigError("--pred needs --data")
        split = load_prepared(args.data, args.split, cfg, args.prep)
        pred_dir = _require(args.pred, "prediction directory")
        d = args.out / "samples"
        d.mkdir(parents=True, exist_ok=True)
        for i, sid in enumerate(split.ids[: args.limit]):
            depth_panel(split.rgb[i].numpy().transpose(1, 2, 0), split.raw[i], split.refined[i],
                        _read_prediction(pred_dir, sid), split.gt[i], split.mask[i], d / f"{sid}.png", sid)
            made += 1
    if not made:
        raise ConfigError("nothing to plot: pass --steps-json and/or --pred")
    print(f"{made} figures -> {args.out}")


COMMANDS = {
    "show-config": cmd_show_config,
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "train-codec": cmd_train_codec,
    "train-diffusion": cmd_train_diffusion,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate-steps": cmd_ablate_steps,
    "ablate-condition": cmd_ablate_condition,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    from .codec import RangeError
    from .evaluation import EvaluationError
    from .geometry import SolverError
    from .io import FormatError
    from .training import TrainingError

    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    handler = None
    try:
        cfg = resolve_config(args)
        if getattr(args, "out", None) is not None:
            handler = start_run(args.out, cfg, argv)
        code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except EvaluationError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_SAMPLES
    except (TrainingError, SolverError, RangeError, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def reference_markdown() -> str:
    """The CLI reference page: subcommands, flags, exit codes, config keys, artifact paths."""
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    lines = ["# glassdepth command-line reference", "",
             "Generated by `python3 scripts/gen_cli_reference.py`; do not edit by hand.", "",
             "Usage: `glassdepth <subcommand> [--config FILE] [--set KEY=VALUE ...] [--seed N] --out RUN_DIR ...`", "",
             "Every run directory holds `config.txt` (resolved configuration, loadable with `--config`), "
             "`command.txt` and `run.log` next to the artifacts listed below.", ""]
    for name, sp in sub.choices.items():
        lines += [f"## {name}", "", sp.description or "", ""]
        lines += ["| flag | default | help |", "|---|---|---|"]
        for a in sp._actions:
            if isinstance(a, argparse._HelpAction):
                continue
            flag = ", ".join(a.option_strings)
            default = "required" if a.required else ("" if a.default in (None, [], argparse.SUPPRESS) else a.default)
            helptext = (a.help or "").replace("|", "\\|")
            if a.choices:
                helptext = f"{helptext} one of {', '.join(a.choices)}".strip()
            lines.append(f"| `{flag}` | {default} | {helptext} |")
        lines += ["", f"Artifacts: {ARTIFACTS[name]}", ""]
        if name in SEED_KEYS:
            lines += [f"`--seed` sets `{SEED_KEYS[name]}`.", ""]
    lines += ["## Exit codes", "", "| code | meaning |", "|---|---|"]
    lines += [f"| {c} | {m} |" for c, m in EXIT_CODES.items()]
    lines += ["", "## Configuration keys", "", "| key | default |", "|---|---|"]
    lines += [f"| `{k}` | `{config_mod._format(v)}` |" for k, v in config_mod.to_flat(ExperimentConfig()).items()]
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    sys.exit(main())
