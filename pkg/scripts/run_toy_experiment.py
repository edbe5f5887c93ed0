"""Run the full toy experiment (data, refine, two-stage training, ablations) and print a summary.

    python3 scripts/run_toy_experiment.py runs/toy --set train.epochs=10
"""

import argparse
import json
import logging

from glassdepth.config import parse_overrides
from glassdepth.experiment import run_toy_experiment, step_degradations

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", help="experiment directory (resumable)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    s = run_toy_experiment(args.root, parse_overrides(args.overrides))
    for name in ("raw", "refined", "diffusion"):
        print(f"{name:10s} rmse {s[name]['rmse']:.4f}  mae {s[name]['mae']:.4f}  rel {s[name]['rel']:.4f}")
    print("condition", {k: round(v["rmse"], 4) for k, v in s["condition"].items()})
    print("step degradation", json.dumps(step_degradations(s["steps"])))
    print("seconds", json.dumps({k: round(v) for k, v in s["seconds"].items()}))
