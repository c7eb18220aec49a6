"""Configuration dataclasses and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class Method(str, enum.Enum):
    FGSM = "fgsm"
    PGD = "pgd"


class Target(str, enum.Enum):
    QUALITY = "quality"
    RATE = "rate"


class Variant(str, enum.Enum):
    FACTORIZED = "factorized"
    HYPERPRIOR = "hyperprior"


# Rate-distortion weights on [0,1]-scaled MSE. The values are the
# 255^2-rescaled equivalents of weights 0.01 / 0.05 / 0.25 on 8-bit MSE.
QUALITY_LAMBDAS = {
    "low": 0.01 * 255 ** 2,
    "mid": 0.05 * 255 ** 2,
    "high": 0.25 * 255 ** 2,
}

FGSM_DEFAULTS = dict(step_size=1e-4, epsilon=7 / 255, max_steps=300)
PGD_DEFAULTS = dict(step_size=0.01, epsilon=0.03, max_steps=40)
PGD_FAST_STEPS = 10


@dataclass(frozen=True)
class AttackConfig:
    method: Method = Method.PGD
    target: Target = Target.QUALITY
    epsilon: float = PGD_DEFAULTS["epsilon"]
    step_size: float = PGD_DEFAULTS["step_size"]
    max_steps: int = PGD_DEFAULTS["max_steps"]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "target", Target(self.target))
        if not 0 < self.step_size <= self.epsilon <= 1:
            raise ValueError(
                f"attack needs 0 < step_size <= epsilon <= 1, got step_size={self.step_size}, "
                f"epsilon={self.epsilon}")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise ValueError(f"max_steps must be a positive integer, got {self.max_steps}")

    @classmethod
    def default(cls, method: Method | str, target: Target | str = Target.QUALITY, **overrides) -> "AttackConfig":
        method = Method(method)
        base = dict(FGSM_DEFAULTS if method is Method.FGSM else PGD_DEFAULTS)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(method=method, target=Target(target), **base)

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 16
    learning_rate: float = 2e-4
    max_epochs: int = 200
    patch_size: int = 256
    attack: AttackConfig = field(default_factory=AttackConfig)
    lam: float = QUALITY_LAMBDAS["mid"]
    seed: int = 0
    val_fraction: float = 0.1
    early_stopping: bool = False
    patience: int = 10
    checkpoint_every: int = 0
    checkpoint_dir: Path | None = None
    # step decay: after this share of max_epochs the learning rate is multiplied by lr_decay
    lr_decay_at: float | None = None
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch_size % 8:
            raise ValueError("patch_size must be divisible by 8")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.lr_decay_at is not None and not 0 < self.lr_decay_at <= 1:
            raise ValueError("lr_decay_at must lie in (0, 1]")

    def decay_epoch(self) -> int | None:
        """First epoch trained at the decayed rate, or None without decay."""
        if self.lr_decay_at is None:
            return None
        return int(round(self.lr_decay_at * self.max_epochs)) + 1

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- experiment config


class ConfigError(ValueError):
    pass


def _bool(v: str | bool) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in {"1", "true", "yes", "on"}:
        return True
    if s in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _float(v) -> float:
    if isinstance(v, str) and "/" in v:
        num, den = v.split("/", 1)
        return float(num) / float(den)
    return float(v)


def _lam(v) -> float:
    """A positive float, or one of the grid names ``low``, ``mid``, ``high``."""
    if isinstance(v, str) and v.strip() in QUALITY_LAMBDAS:
        return QUALITY_LAMBDAS[v.strip()]
    lam = _float(v)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return lam


@dataclass
class ExperimentConfig:
    """Every setting a CLI run can consume. Unset values fall back per command."""

    dataset_dir: Path | None = None
    test_dir: Path | None = None
    model_path: Path | None = None
    output_dir: Path | None = None
    variant: Variant = Variant.FACTORIZED
    lam: float | None = None  # None: checkpoint value, or the mid grid point when training
    method: Method = Method.PGD
    target: Target = Target.QUALITY
    epsilon: float | None = None
    step_size: float | None = None
    max_steps: int | None = None
    seed: int = 0
    batch_size: int = 16
    learning_rate: float = 2e-4
    max_epochs: int = 200
    patch_size: int = 256
    val_fraction: float = 0.1
    lr_decay_at: float | None = None
    early_stopping: bool = False
    patience: int = 10
    checkpoint_every: int = 0
    fast: bool = False
    q: int = 20
    workers: int = 1
    heatmaps: bool = True

    _converters = {
        "dataset_dir": Path, "test_dir": Path, "model_path": Path, "output_dir": Path,
        "variant": Variant, "lam": _lam, "method": Method, "target": Target,
        "epsilon": _float, "step_size": _float, "max_steps": int, "seed": int,
        "batch_size": int, "learning_rate": _float, "max_epochs": int, "patch_size": int,
        "val_fraction": _float, "lr_decay_at": _float, "early_stopping": _bool, "patience": int,
        "checkpoint_every": int, "fast": _bool, "q": int, "workers": int, "heatmaps": _bool,
    }

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, values: dict[str, Any]) -> "ExperimentConfig":
        known = set(self.keys())
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if raw is None:
                continue
            try:
                setattr(self, key, self._converters[key](raw))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
        return self

    def attack(self) -> AttackConfig:
        steps = self.max_steps
        if steps is None and self.fast and self.method is Method.PGD:
            steps = PGD_FAST_STEPS
        return AttackConfig.default(self.method, self.target, epsilon=self.epsilon,
                                    step_size=self.step_size, max_steps=steps, seed=self.seed)

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            max_epochs=self.max_epochs, patch_size=self.patch_size, attack=self.attack(),
            lam=self.lam if self.lam is not None else QUALITY_LAMBDAS["mid"],
            seed=self.seed, val_fraction=self.val_fraction, lr_decay_at=self.lr_decay_at,
            early_stopping=self.early_stopping, patience=self.patience,
            checkpoint_every=self.checkpoint_every,
            checkpoint_dir=self.output_dir / "checkpoints" if self.output_dir else None,
        )

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            value = getattr(self, key)
            if value is None:
                continue
            if isinstance(value, enum.Enum):
                value = value.value
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())
