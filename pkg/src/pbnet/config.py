"""Experiment configuration and its JSON file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

APPLICATIONS = ("sr-design", "mri-prior")
OPTIMIZERS = ("sgd", "adam")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """All experiment knobs.  ``checkpoint_every`` counts layers, and each
    unrolled iteration contributes two layers (gradient step, then prior)."""

    schema_version: int = SCHEMA_VERSION
    application: str = "sr-design"
    image_size: int = 32
    n_unrolls: int = 10
    fp_iters: int = 30
    fp_tol: float = 0.0
    engine: str = "memory-efficient"
    checkpoint_every: int = 10
    noise_std: float = 0.05
    epochs: int = 20
    batch_size: int = 4
    n_train: int = 8
    n_test: int = 8
    seed: int = 0
    learnable: tuple | None = None
    optimizer: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_contraction: float = 0.5
    max_contraction: float = 0.99
    prior_contraction: float = 0.25
    # super-resolution design
    patch_size: int = 8
    n_channels: int = 4
    design_init: str = "random"
    # multi-coil MRI prior
    n_coils: int = 4
    acceleration: float = 3.0
    center_lines: int = 6
    hidden_channels: int = 8
    kernel_size: int = 3
    lipschitz_budget: float = 0.5
    share_prior: bool = True
    prior_init_scale: float = 0.05

    def __post_init__(self):
        if self.learnable is not None:
            object.__setattr__(self, "learnable", tuple(self.learnable))
        validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["learnable"] is not None:
            out["learnable"] = list(out["learnable"])
        return out


def validate(cfg: ExperimentConfig) -> None:
    from .engines import ENGINES

    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg.schema_version} is not supported (expected {SCHEMA_VERSION})")
    if cfg.application not in APPLICATIONS:
        raise ConfigError(f"application must be one of {APPLICATIONS}")
    if cfg.engine not in ENGINES:
        raise ConfigError(f"engine must be one of {ENGINES}")
    if cfg.optimizer not in OPTIMIZERS:
        raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
    for name in ("image_size", "n_unrolls", "fp_iters", "checkpoint_every", "batch_size", "n_train",
                 "n_test", "patch_size", "n_channels", "n_coils", "hidden_channels", "kernel_size"):
        if int(getattr(cfg, name)) < 1:
            raise ConfigError(f"{name} must be a positive count")
    if cfg.epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if cfg.lr <= 0:
        raise ConfigError("lr must be positive")
    if cfg.noise_std < 0 or cfg.fp_tol < 0:
        raise ConfigError("noise_std and fp_tol must be >= 0")
    if not cfg.step_contraction > 0:
        raise ConfigError("step_contraction must be positive")
    if not 0 < cfg.max_contraction < 1:
        raise ConfigError("max_contraction must lie in (0, 1)")
    if not 0 <= cfg.prior_contraction < 1:
        raise ConfigError("prior_contraction must lie in [0, 1)")
    if cfg.design_init not in ("random", "one-hot", "zero"):
        raise ConfigError("design_init must be random, one-hot or zero")


def from_dict(data: dict[str, Any], overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    data = dict(data)
    data.update(overrides or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "schema_version" not in data:
        raise ConfigError("missing schema_version")
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data, overrides)


def parse_override(item: str) -> tuple[str, Any]:
    """Parse ``KEY=VALUE``; the value is read as JSON when possible, else as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
