"""Command line entry point: ``tpfl {run,ablate,gen-data,validate} --config FILE``.

Failures exit nonzero with a JSON object on stderr. Log verbosity comes from
the ``TPFL_LOG_LEVEL`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from tpfl import config as cfgmod
from tpfl.config import ConfigError
from tpfl.data import DatasetFormatError, generate_synthetic, required_per_class, save_dataset
from tpfl.harness import ABLATION_AXES, run_ablation, run_experiment


def _fail(kind: str, message: str, code: int, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def _cmd_run(args) -> int:
    config = cfgmod.load(args.config)
    res = run_experiment(config, args.out, args.seed_override)
    s = res.summary
    print(f"{s.variant}: accuracy {s.accuracy_mean:.4f} +/- {s.accuracy_std:.4f}, "
          f"macro-F1 {s.f1_mean:.4f} +/- {s.f1_std:.4f} -> {res.out_dir}")
    return 3 if s.failed else 0


def _cmd_ablate(args) -> int:
    config = cfgmod.load(args.config)
    out = Path(args.out or Path(config.out_dir) / f"ablate-{args.axis}")
    points, paths = run_ablation(args.axis, config, out)
    for p in points:
        print(f"{args.axis}={p.x:g}: accuracy {sum(p.accuracy) / len(p.accuracy):.4f}")
    for path in paths.values():
        print(path)
    return 0


def _cmd_gen_data(args) -> int:
    c = cfgmod.load(args.config).validate()
    out = Path(args.out or Path(c.out_dir) / "data")
    per_class = c.train_per_class or required_per_class(c.C, c.M, c.s, c.n_k)
    for seed in c.seeds:
        for split, n in (("train", per_class), ("test", c.test_per_class)):
            ds = generate_synthetic(seed, c.C, n, c.H, c.W, c.Ch, c.noise_sigma, split)
            print(save_dataset(ds, out / f"seed{seed}" / split))
    return 0


def _cmd_validate(args) -> int:
    cfgmod.load(args.config).validate()
    print("ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpfl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run every seed of one config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed-override", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("ablate", help="run an ablation sweep and write plot data")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ablate)
    p = sub.add_parser("gen-data", help="write the synthetic datasets for each seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_gen_data)
    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TPFL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), 2, problems=exc.problems)
    except FileNotFoundError as exc:
        return _fail("FileNotFoundError", str(exc), 2)
    except DatasetFormatError as exc:
        return _fail("DatasetFormatError", str(exc), 2, field=exc.field)
    except (ValueError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
