"""Flat ``key = value`` training configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..manifold import DENOMINATORS, OptimizerMode
from ..model import ModelSpec


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimizer
    lr: float = 1e-2
    lr_adam: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lookahead_k: int = 5
    v0: str = "zero"  # inv_d damps early steps once bias correction divides by 1 - beta2^t
    denominator: str = "sqrt_v"
    bias_correction: bool = True
    lookahead: bool = True
    retraction: bool = True
    # schedule
    epochs: int = 10
    batch_size: int = 128
    eps_train: float = 36 / 255
    radius_factor: float = 1.5
    warmup_frac: float = 0.2
    lr_schedule: str = "cosine"  # or "constant"
    # model
    depth: int = 4
    width: int = 64
    alpha: float = 1 / 16
    beta: float = 0.75
    patch: int = 2
    padding: str = "circular"
    activation: str = "beta_abs"
    pos_embed: bool = True
    # data and output
    dataset: str = "mnist"
    train_path: str = ""
    test_path: str = ""
    limit_train: int = 0
    limit_test: int = 0
    checkpoint: str = "lipnext.ckpt"
    metrics: str = ""
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr", "lr_adam", "eps_adam", "radius_factor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("epochs", "batch_size", "lookahead_k", "depth", "width", "patch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.eps_train < 0:
            raise ConfigError("eps_train must be non-negative")
        if not 0 <= self.warmup_frac <= 1:
            raise ConfigError("warmup_frac must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be constant or cosine")
        if self.denominator not in DENOMINATORS:
            raise ConfigError(f"denominator must be one of {DENOMINATORS}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.dataset not in ("mnist", "cifar"):
            raise ConfigError("dataset must be mnist or cifar")
        if self.v0 not in ("inv_d", "zero"):
            try:
                float(self.v0)
            except ValueError:
                raise ConfigError("v0 must be inv_d, zero or a number") from None

    @property
    def mode(self) -> OptimizerMode:
        return OptimizerMode(self.denominator, self.bias_correction, self.lookahead, self.retraction)

    def model_spec(self, input_shape, n_classes: int = 10) -> ModelSpec:
        return ModelSpec(
            depth=self.depth,
            width=self.width,
            alpha=self.alpha,
            beta=self.beta,
            patch=self.patch,
            n_classes=n_classes,
            input_shape=tuple(input_shape),
            padding=self.padding,
            activation=self.activation,
            pos_embed=self.pos_embed,
            seed=self.seed,
        )

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            if "/" in text:
                num, den = text.split("/", 1)
                return float(num) / float(den)
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def _field_types() -> dict:
    return {f.name: f.type for f in fields(TrainConfig)}


def parse_assignments(lines, source: str = "<config>") -> dict:
    types = _field_types()
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def load_config(path=None, overrides=()) -> TrainConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_assignments(p.read_text().splitlines(), str(p)))
    values.update(parse_assignments(overrides, "<override>"))
    return TrainConfig(**values)
