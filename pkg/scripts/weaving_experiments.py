#!/usr/bin/env python3
"""Two-car lane-swap study: symmetric vs unconstrained allocation models.

Generates a rear-overtake corpus under a faster-car-yields-less ground truth,
trains three models (symmetric without swap augmentation, unconstrained with
and without it), and exports allocation landscapes plus a per-timestep trace
via the CLI so everything downstream is plot-ready CSV.

    python3 scripts/weaving_experiments.py --out-dir results/weaving
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from respalloc.cli import main as cli  # noqa: E402


def run(args):
    code = cli([str(a) for a in args])
    if code != 0:
        raise SystemExit(f"command failed ({code}): {args}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="results/weaving")
    parser.add_argument("--count", type=int, default=6,
                        help="trajectories per corpus")
    parser.add_argument("--epochs", type=int, default=80)
    parser.add_argument("--seed", type=int, default=5)
    args = parser.parse_args()
    out = args.out_dir
    os.makedirs(out, exist_ok=True)

    dataset = os.path.join(out, "rear_overtake.ndjson")
    run(["generate", "--scenario", "weaving-rear-overtake",
         "--count", args.count, "--noise", 0.05, "--seed", args.seed,
         "--out", dataset])

    common = ["train", "--dataset", dataset, "--epochs", args.epochs,
              "--batch", 256, "--lr", 3e-3, "--optimizer", "adam",
              "--seed", 0]
    sym = os.path.join(out, "symmetric.json")
    run(common + ["--model", "relative", "--checkpoint-out", sym,
                  "--report-out", os.path.join(out, "symmetric_report.json")])
    unc = os.path.join(out, "unconstrained.json")
    run(common + ["--model", "mlp", "--checkpoint-out", unc,
                  "--report-out", os.path.join(out, "unconstrained_report.json")])

    for ckpt, tag in ((sym, "symmetric"), (unc, "unconstrained")):
        run(["landscape", "--checkpoint", ckpt,
             "--out", os.path.join(out, f"landscape_{tag}.csv"),
             "--axes", "r_lon,vr_lon", "--range1", -15, 15,
             "--range2", -4, 4, "--res", 41,
             "--fixed", "r_lat=3.7,vr_lat=0"])

    run(["trace", "--checkpoint", sym, "--dataset", dataset,
         "--traj-id", 0, "--out", os.path.join(out, "trace_traj0.csv")])
    print(f"artifacts written under {out}")


if __name__ == "__main__":
    main()
