"""Configuration for training runs and the command-line front end.

Values resolve in three layers: dataclass defaults (the MNIST recipe:
momentum 0.9, weight decay 5e-4, base learning rate 0.01 with inverse
decay, batch 64, 10000 iterations), an optional JSON/YAML config file with
flat keys, and command-line overrides. Environment variables (optionally
from a ``.env`` file) provide the dataset and output roots.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union, get_args, get_origin, get_type_hints

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()

VARIANTS = ("baseline", "mfc", "mc")
FC_SIZES = (128, 256, 512)
# Proportions of pruned weights swept by default.
DEFAULT_FRACTIONS = [0.0, 0.1, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 0.98]


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one SGD run."""

    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_gamma: float = 1e-4
    lr_power: float = 0.75
    iterations: int = 10000
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 0
    log_every: int = 100

    def validate(self) -> "TrainConfig":
        """Raise :class:`ConfigError` if any field is out of range."""

        for name in ("base_lr", "momentum", "weight_decay", "lr_gamma", "lr_power"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.eval_every < 0 or self.log_every < 0:
            raise ConfigError("eval_every and log_every must be >= 0")
        return self


@dataclass
class RunConfig:
    """Every knob of an experiment run, including the training recipe."""

    # training recipe
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_gamma: float = 1e-4
    lr_power: float = 0.75
    iterations: int = 10000
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 1000
    log_every: int = 100

    # architecture
    variant: str = "mfc"
    fc_size: int = 512
    k: int = 4
    conv1_filters: int = 20
    conv2_filters: Optional[int] = None
    allow_custom_sizes: bool = False

    # pruning
    prune_steps: Optional[int] = None
    prune_fractions: List[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    retrain_iterations: int = 4000
    retrain_base_lr: float = 0.001
    holdout: int = 5000
    tolerance: float = 0.002

    # io and execution
    data_dir: str = field(
        default_factory=lambda: os.getenv("MAXPRUNE_DATA", os.path.join("data", "mnist"))
    )
    output_dir: str = field(default_factory=lambda: os.getenv("MAXPRUNE_OUTPUT", "runs"))
    limit: Optional[int] = None
    threads: int = 1
    eval_chunk: int = 1000
    permutations: int = 10000
    deterministic: bool = False
    sparse: bool = True

    def to_train_config(self) -> TrainConfig:
        """Return the :class:`TrainConfig` for a full training run."""

        return TrainConfig(
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_gamma=self.lr_gamma,
            lr_power=self.lr_power,
            iterations=self.iterations,
            batch_size=self.batch_size,
            seed=self.seed,
            eval_every=self.eval_every,
            log_every=self.log_every,
        )

    def to_retrain_config(self) -> TrainConfig:
        """Return the shorter, lower-rate config used after each pruning step."""

        return replace(
            self.to_train_config(),
            iterations=self.retrain_iterations,
            base_lr=self.retrain_base_lr,
        )

    def steps_for(self, k_current: int) -> int:
        """Neuron-prune steps for a maxout layer of group size ``k_current``.

        Unset ``prune_steps`` means down to k=1.
        """

        steps = k_current - 1 if self.prune_steps is None else self.prune_steps
        if not 0 <= steps <= k_current - 1:
            raise ConfigError(
                f"prune_steps must lie in [0, k-1] = [0, {k_current - 1}] for this network, got {steps}"
            )
        return steps

    def validate(self) -> "RunConfig":
        """Check every field before any compute starts."""

        self.to_train_config().validate()
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fc_size not in FC_SIZES and not self.allow_custom_sizes:
            raise ConfigError(f"fc_size must be one of {FC_SIZES}, got {self.fc_size}")
        if self.fc_size < 1 or self.conv1_filters < 1:
            raise ConfigError("layer sizes must be positive")
        if self.conv2_filters is not None and self.conv2_filters < 1:
            raise ConfigError("conv2_filters must be positive")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.prune_steps is not None and self.prune_steps < 0:
            raise ConfigError(f"prune_steps must be >= 0, got {self.prune_steps}")
        fractions = list(self.prune_fractions)
        if any(not 0.0 <= p < 1.0 for p in fractions):
            raise ConfigError("prune_fractions must lie in [0, 1)")
        if fractions != sorted(fractions):
            raise ConfigError("prune_fractions must be sorted ascending")
        if self.retrain_iterations < 0 or self.retrain_base_lr < 0:
            raise ConfigError("retrain_iterations and retrain_base_lr must be >= 0")
        if self.holdout < 1:
            raise ConfigError(f"holdout must be >= 1, got {self.holdout}")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be >= 0")
        if self.limit is not None and self.limit < 1:
            raise ConfigError(f"limit must be >= 1 when set, got {self.limit}")
        if self.threads < 1 or self.eval_chunk < 1:
            raise ConfigError("threads and eval_chunk must be >= 1")
        if self.permutations < 1:
            raise ConfigError("permutations must be >= 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        """Return the fully resolved config as plain data (for ``run.json``)."""

        return asdict(self)


def _known_keys() -> List[str]:
    return [f.name for f in fields(RunConfig)]


def _type_name(hint: Any) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(name: str, hint: Any, value: Any) -> Any:
    """Check ``value`` against the field type; integral floats become ints."""

    origin = get_origin(hint)
    if origin is Union:
        if value is None:
            return None
        inner = [arg for arg in get_args(hint) if arg is not type(None)]
        return _coerce(name, inner[0], value)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        (item,) = get_args(hint)
        return [_coerce(name, item, v) for v in value]
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, (str, Path)):
            return str(value)
    raise ConfigError(f"{name} must be of type {_type_name(hint)}, got {value!r}")


def read_config_file(path: str | Path) -> Dict[str, Any]:
    """Read a flat-key config file (JSON or YAML)."""

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping of flat keys")
    return data


def load_run_config(
    path: str | Path | None = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Resolve defaults, then ``path``, then ``overrides``; validate the result.

    ``None`` values in ``overrides`` are ignored so unset command-line flags
    do not mask file values.
    """

    values: Dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    unknown = sorted(set(values) - set(_known_keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    hints = get_type_hints(RunConfig)
    values = {key: _coerce(key, hints[key], value) for key, value in values.items()}
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()
