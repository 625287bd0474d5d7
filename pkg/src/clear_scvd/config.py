"""Flat ``key=value`` run configuration and the shipped presets."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .encoder import EncoderConfig
from .objectives import LossConfig

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs_cl: int = 20
    epochs_ft: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    optimizer: str = "adamw"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    task: str = "ORDER"
    device: str = "cpu"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_cl < 1 or self.epochs_ft < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run, as one flat record mirroring the config file."""

    # data
    train_ratio: float = 0.8
    min_frequency: int = 2
    max_len: int = 256
    # encoder
    k: int = 128
    heads: int = 4
    layers_mlm: int = 3
    layers_feat: int = 3
    ffn_dim: int = 0
    mask_rate: float = 0.3
    encoder_kind: str = "transformer"
    projection_norm: str = "layer"
    dtype: str = "float32"
    # objectives
    margin: float = 1.0
    lambda_cl: float = 1.0
    lambda_mlm: float = 0.1
    # sampling
    ablation: str = "none"
    resample_each_epoch: bool = True
    # training
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs_cl: int = 20
    epochs_ft: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    optimizer: str = "adamw"
    task: str = "ORDER"
    device: str = "cpu"
    # detection
    threshold: float = 0.5

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.device != "cpu":
            raise ConfigError("only the cpu device is supported")
        self.loss_config()
        self.train_config()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            k=self.k,
            heads=self.heads,
            layers_mlm=self.layers_mlm,
            layers_feat=self.layers_feat,
            max_len=self.max_len,
            mask_rate=self.mask_rate,
            encoder_kind=self.encoder_kind,
            ffn_dim=self.ffn_dim,
            projection_norm=self.projection_norm,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(margin=self.margin, lambda_cl=self.lambda_cl, lambda_mlm=self.lambda_mlm)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs_cl=self.epochs_cl,
            epochs_ft=self.epochs_ft,
            weight_decay=self.weight_decay,
            seed=self.seed,
            optimizer=self.optimizer,
            task=self.task,
            device=self.device,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(name: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


_FIELD_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(RunConfig)}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, _FIELD_TYPES[key])
    return dataclasses.replace(base or RunConfig(), **values)


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    text = resources.files("clear_scvd.presets").joinpath(f"{name}.cfg").read_text(encoding="utf-8")
    return parse_config_text(text)


def load_config(path_or_preset: str | Path | None) -> RunConfig:
    """Read a config file, or a preset by bare name; ``CLEAR_SEED`` overrides the seed."""
    if path_or_preset is None:
        config = preset("desk")
    elif str(path_or_preset) in PRESETS and not Path(path_or_preset).exists():
        config = preset(str(path_or_preset))
    else:
        config = parse_config_text(Path(path_or_preset).read_text(encoding="utf-8"), preset("desk"))
    env_seed = os.environ.get("CLEAR_SEED")
    if env_seed is not None:
        config = config.replace(seed=_coerce("CLEAR_SEED", env_seed, int))
    return config
