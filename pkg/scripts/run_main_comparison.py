"""Train all four protocol variants on the default task and print a results table.

    python3 scripts/run_main_comparison.py [--config configs/default.ini] [--out runs/main]
"""

import argparse
from pathlib import Path

from tpfl import config as cfgmod
from tpfl.config import VARIANTS
from tpfl.harness import run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/main")
    args = ap.parse_args()
    base = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()

    print(f"{'variant':<20} {'accuracy':>18} {'macro-F1':>18}")
    for variant in VARIANTS:
        res = run_experiment(base.replace(variant=variant), Path(args.out) / variant)
        s = res.summary
        print(f"{variant:<20} {s.accuracy_mean:.4f} +/- {s.accuracy_std:.4f} "
              f"{s.f1_mean:.4f} +/- {s.f1_std:.4f}")


if __name__ == "__main__":
    main()
