"""Toy-task delay studies: damage vs delay, consistent vs inconsistent delay,
momentum preference under mitigation, and gradient shrinking.

Usage: python3 scripts/delay_experiments.py [out_dir] [--seeds N] [--workers W]
"""

import argparse
import copy
import json
from pathlib import Path

from pipecomp import harness as hn

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def load(name, seeds):
    d = json.loads((CONFIGS / f"{name}.json").read_text())
    d["seeds"] = list(range(seeds))
    return d


def run_grid(base, changes, label, out, workers):
    rows = []
    for change in changes:
        d = copy.deepcopy(base)
        for k, v in change.items():
            d = hn.set_path(d, k, v)
        s = hn.run_experiment(hn.ExperimentConfig.from_dict(d), save=False, workers=workers)
        rows.append({**change, "mean_final_loss": s["mean_final_loss"], "std_final_loss": s["std_final_loss"],
                     "diverged": s["diverged"]})
        print(label, change, f"{s['mean_final_loss']:.4f}", flush=True)
    cols = list(changes[0]) + ["mean_final_loss", "std_final_loss", "diverged"]
    hn.write_rows(out / f"{label}.csv", rows, cols)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="runs/delay")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = load("toy_delay16", args.seeds)

    delays = [0, 1, 2, 4, 8, 16, 32, 64]
    run_grid(base, [{"pipeline.delay": D, "pipeline.consistency": c, "optimizer.mitigation.method": mth}
                    for mth in ("none", "lwp_plus_gsc") for c in ("consistent", "inconsistent") for D in delays],
             "delay_consistency", out, args.workers)

    # eta / (1 - m) held fixed while m varies
    run_grid(base, [{"optimizer.momentum": m, "optimizer.eta": 0.1 * (1 - m), "optimizer.mitigation.method": mth}
                    for mth in ("none", "gsc", "lwp", "lwp_plus_gsc")
                    for m in (0.0, 0.9, 0.97, 0.99, 0.997, 0.999)],
             "momentum_sweep_D16", out, args.workers)

    run_grid(base, [{"optimizer.mitigation.method": "grad_shrink", "optimizer.mitigation.gamma": g}
                    for g in (1.0, 0.99, 0.97, 0.95, 0.9, 0.8)],
             "grad_shrink_D16", out, args.workers)


if __name__ == "__main__":
    main()
