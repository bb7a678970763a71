"""Experiment configuration and its flat ``key = value`` text format.

Lines are ``key = value``; blank lines and lines starting with ``#`` are
ignored. Lists (only ``seeds``) are comma-separated. Booleans are
``true``/``false``. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("local_only", "promptfl_text_only", "tpfl", "atpfl")
OPTIMIZERS = ("sgd", "adam")
SCHEDULERS = ("none", "cosine")


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "atpfl"
    # federation
    M: int = 10
    K: int = 10
    T_g: int = 30
    T_loc: int = 2
    batch_size: int = 0  # 0 = whole local set
    alpha: float = 0.3
    optimizer: str = "adam"
    scheduler: str = "cosine"
    mu: float = 1.0
    gamma: float = 0.07
    text_aug: str = "per_class"
    workers: int = 1
    # prompts and backbone
    L: int = 4
    class_position: int = -1  # -1 = after the last context token
    d_tok: int = 16
    D: int = 32
    hidden: int = 64
    encoder_gain: float = 1.0
    backbone_seed: int = 0
    init_std: float = 0.02
    template: str = "padding"
    template_size: int = 1
    visual_prompt: bool = True
    # data
    C: int = 8
    n_k: int = 4
    s: int = 2
    H: int = 16
    W: int = 16
    Ch: int = 1
    noise_sigma: float = 0.5
    train_per_class: int = 0  # 0 = just enough for the partition
    test_per_class: int = 32
    f1_empty: float = 1.0
    # bookkeeping
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = "runs"

    @property
    def effective_mu(self) -> float:
        return self.mu if self.variant == "atpfl" else 0.0

    @property
    def train_visual(self) -> bool:
        return self.visual_prompt and self.variant != "promptfl_text_only"

    @property
    def context_position(self) -> int:
        return self.L if self.class_position < 0 else self.class_position

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.H, self.W, self.Ch)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def problems(self) -> list[str]:
        p = []
        if self.variant not in VARIANTS:
            p.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.optimizer not in OPTIMIZERS:
            p.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.scheduler not in SCHEDULERS:
            p.append(f"scheduler must be one of {SCHEDULERS}")
        if self.text_aug not in ("per_class", "pooled"):
            p.append("text_aug must be per_class or pooled")
        if self.template not in ("padding", "fixed_patch", "random_patch"):
            p.append(f"unknown template {self.template!r}")
        for name in ("M", "K", "L", "d_tok", "D", "hidden", "C", "n_k", "s", "H", "W", "Ch",
                     "template_size", "test_per_class", "workers"):
            if getattr(self, name) < 1:
                p.append(f"{name} must be >= 1")
        for name in ("T_g", "T_loc", "batch_size", "train_per_class"):
            if getattr(self, name) < 0:
                p.append(f"{name} must be >= 0")
        if self.K > self.M:
            p.append(f"K={self.K} exceeds M={self.M}")
        if self.s > self.C:
            p.append(f"s={self.s} exceeds C={self.C}")
        if self.C < 2:
            p.append("C must be >= 2")
        if self.L > 64:
            p.append("L must be <= 64")
        if self.class_position > self.L or self.class_position < -1:
            p.append(f"class_position={self.class_position} outside [0, L={self.L}] (or -1)")
        if self.mu < 0:
            p.append("mu must be >= 0")
        if not self.gamma > 0:
            p.append("gamma must be > 0")
        if self.alpha < 0:
            p.append("alpha must be >= 0")
        if self.noise_sigma < 0 or self.init_std < 0 or self.encoder_gain <= 0:
            p.append("noise_sigma, init_std must be >= 0 and encoder_gain > 0")
        if self.template in ("fixed_patch", "random_patch") and self.template_size > min(self.H, self.W):
            p.append("template_size larger than the image")
        if self.f1_empty not in (0.0, 1.0):
            p.append("f1_empty must be 0 or 1")
        if not self.seeds:
            p.append("seeds must be non-empty")
        if self.train_per_class:
            need = -(-self.M * self.s // self.C) * self.n_k
            if self.train_per_class < need:
                p.append(f"train_per_class={self.train_per_class} < {need} needed by the partition")
        return p

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name].type
    if kind == "bool":
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"{name}: expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("tuple"):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def dumps(config: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config))


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            problems.append(f"line {lineno}: expected key = value")
        elif key not in _FIELDS:
            problems.append(f"line {lineno}: unknown key {key!r}")
        else:
            try:
                values[key] = _parse_value(key, raw)
            except ValueError as exc:
                problems.append(f"line {lineno}: {exc}")
    if problems:
        raise ConfigError(problems)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(config))
