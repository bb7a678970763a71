"""Run ablation sweeps and write plot-ready .dat files.

    python3 scripts/run_ablations.py --axis shots clients infonce [--out runs/ablations]
"""

import argparse
from pathlib import Path

from tpfl import config as cfgmod
from tpfl.harness import ABLATION_AXES, run_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--axis", nargs="+", choices=ABLATION_AXES, default=list(ABLATION_AXES))
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    base = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()

    for axis in args.axis:
        points, paths = run_ablation(axis, base, Path(args.out) / axis)
        for p in points:
            acc = sum(p.accuracy) / len(p.accuracy)
            f1 = sum(p.macro_f1) / len(p.macro_f1)
            print(f"{axis:<8} x={p.x:<6g} accuracy {acc:.4f}  macro-F1 {f1:.4f}")
        for path in paths.values():
            print("  wrote", path)


if __name__ == "__main__":
    main()
