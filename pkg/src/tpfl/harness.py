"""Multi-seed experiment runs, ablation presets, and CSV / plot-data output."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tpfl import config as cfgmod
from tpfl.config import ExperimentConfig
from tpfl.federation import NonFiniteLossError, RoundRecord, server_run

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_COLUMNS = ("schema_version", "seed", "round", "accuracy", "macro_f1", "l_con", "l_aug_text", "l_aug_visual")
SUMMARY_COLUMNS = ("schema_version", "variant", "n_seeds", "n_failed", "accuracy_mean", "accuracy_std",
                   "macro_f1_mean", "macro_f1_std", "failed_seeds")
ABLATION_AXES = ("infonce", "shots", "clients")
SHOT_SWEEP = (1, 2, 4, 8, 16)
CLIENT_SWEEP = (10, 25, 50, 100)
DEFAULT_MU = ExperimentConfig().mu


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


@dataclass
class Summary:
    variant: str
    final_accuracy: dict[int, float]
    final_f1: dict[int, float]
    failed: dict[int, str] = field(default_factory=dict)

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(list(self.final_accuracy.values()))) if self.final_accuracy else float("nan")

    @property
    def accuracy_std(self) -> float:
        return float(np.std(list(self.final_accuracy.values()))) if self.final_accuracy else float("nan")

    @property
    def f1_mean(self) -> float:
        return float(np.mean(list(self.final_f1.values()))) if self.final_f1 else float("nan")

    @property
    def f1_std(self) -> float:
        return float(np.std(list(self.final_f1.values()))) if self.final_f1 else float("nan")

    def row(self) -> list[str]:
        return [str(SCHEMA_VERSION), self.variant, str(len(self.final_accuracy) + len(self.failed)),
                str(len(self.failed)), _fmt(self.accuracy_mean), _fmt(self.accuracy_std),
                _fmt(self.f1_mean), _fmt(self.f1_std), " ".join(str(s) for s in sorted(self.failed))]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    summary: Summary
    out_dir: Path | None = None


def metrics_csv(records: list[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow([SCHEMA_VERSION, r.seed, r.round] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS[3:]])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != METRIC_COLUMNS:
        raise ValueError(f"unexpected metrics header {tuple(rows[0].keys())}")
    return rows


def summarize(variant: str, records: list[RoundRecord], failed: dict[int, str] | None = None) -> Summary:
    """Final-round accuracy / F1 per seed; mean and population std across seeds."""
    last: dict[int, RoundRecord] = {}
    for r in records:
        if r.seed not in last or r.round > last[r.seed].round:
            last[r.seed] = r
    return Summary(variant, {s: r.accuracy for s, r in last.items()}, {s: r.macro_f1 for s, r in last.items()},
                   dict(failed or {}))


def run_experiment(config: ExperimentConfig, out_dir=None, seed_override: int | None = None) -> ExperimentResult:
    """One server run per seed; writes metrics.csv, timings.csv, summary.csv and config.ini.

    metrics.csv holds only deterministic values; wall-clock times go to
    timings.csv so that repeated runs give byte-identical metrics.
    """
    config.validate()
    if seed_override is not None:
        config = config.replace(seeds=(seed_override,))
    records: list[RoundRecord] = []
    failed: dict[int, str] = {}
    for seed in config.seeds:
        try:
            result = server_run(config, seed=seed)
        except NonFiniteLossError as exc:
            log.error("seed %d failed: %s", seed, exc)
            failed[seed] = str(exc)
            continue
        records.extend(result.records)
        if result.records:
            last = result.records[-1]
            log.info("%s seed %d: accuracy %.4f macro-F1 %.4f", config.variant, seed, last.accuracy, last.macro_f1)
    summary = summarize(config.variant, records, failed)
    out = None
    if out_dir is not None or config.out_dir:
        out = Path(out_dir if out_dir is not None else config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(records))
        with open(out / "timings.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("seed", "round", "wall_ms"))
            w.writerows((r.seed, r.round, f"{r.wall_ms:.3f}") for r in records)
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            w.writerow(summary.row())
        cfgmod.save(config, out / "config.ini")
    return ExperimentResult(config, records, summary, out)


# ------------------------------------------------------------------ ablations


def sweep_value(axis: str, config: ExperimentConfig):
    return {"infonce": config.mu, "shots": config.n_k, "clients": config.M}[axis]


def preset_ablation(axis: str, base: ExperimentConfig) -> list[ExperimentConfig]:
    if axis == "infonce":
        on = base.mu if base.mu > 0 else DEFAULT_MU
        return [base.replace(variant="atpfl", mu=0.0), base.replace(variant="atpfl", mu=on)]
    if axis == "shots":
        return [base.replace(n_k=n) for n in SHOT_SWEEP]
    if axis == "clients":
        return [base.replace(M=m, K=m) for m in CLIENT_SWEEP]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


@dataclass
class SweepPoint:
    axis: str
    x: float
    accuracy: list[float]
    macro_f1: list[float]


def emit_plotdata(points: list[SweepPoint], out_dir) -> dict[str, Path]:
    """Write ``<axis>_<metric>.dat`` files with whitespace columns x, mean, std (sorted by x)."""
    if not points:
        raise ValueError("no sweep points")
    axes = {p.axis for p in points}
    if len(axes) != 1:
        raise ValueError(f"sweep points mix axes {sorted(axes)}")
    axis = axes.pop()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for metric in ("accuracy", "macro_f1"):
        lines = ["# x mean std"]
        for p in sorted(points, key=lambda p: p.x):
            vals = np.asarray(getattr(p, metric), dtype=np.float64)
            lines.append(f"{_fmt(p.x)} {_fmt(vals.mean())} {_fmt(vals.std())}")
        path = out_dir / f"{axis}_{metric}.dat"
        path.write_text("\n".join(lines) + "\n")
        paths[metric] = path
    return paths


def run_ablation(axis: str, base: ExperimentConfig, out_dir) -> tuple[list[SweepPoint], dict[str, Path]]:
    out_dir = Path(out_dir)
    points = []
    for cfg in preset_ablation(axis, base):
        x = sweep_value(axis, cfg)
        res = run_experiment(cfg, out_dir / f"{axis}={x}")
        s = res.summary
        points.append(SweepPoint(axis, float(x), [s.final_accuracy[k] for k in sorted(s.final_accuracy)],
                                 [s.final_f1[k] for k in sorted(s.final_f1)]))
    return points, emit_plotdata(points, out_dir)
