"""Centralized run configuration.

A run is described entirely by a `RunConfig`, loaded from a JSON file and
command-line flags. Environment variables and `.env` files are not consulted:
the only settings source is the explicit init values.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from src.common.errors import ConfigError
from src.ssl.augment import AugmentationPolicy

logger = logging.getLogger(__name__)


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkConfig(Section):
    cells: int = Field(4, ge=2)
    init_channels: int = Field(8, ge=1)
    projection_hidden: int = Field(256, ge=1)
    projection_out: int = Field(128, ge=1)


class SearchConfig(Section):
    max_epochs: int = Field(30, ge=1)
    ratios: tuple[float, float, float] = (0.2, 0.4, 0.4)
    prune_direction: Literal["forward", "backward", "none"] = "forward"
    rounding: Literal["round", "floor"] = "round"
    drop_p: float = Field(0.2, ge=0.0, le=1.0)
    batch_size: int = Field(64, ge=2)
    objective: Literal["ssl", "sl"] = "ssl"
    val_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    grad_clip: float | None = Field(5.0, gt=0.0)

    @model_validator(mode="after")
    def _check_ratios(self) -> "SearchConfig":
        if any(r < 0 for r in self.ratios):
            raise ValueError(f"phase ratios must be nonnegative, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"phase ratios must sum to 1, got {self.ratios}")
        if self.ratios[2] == 0 and self.prune_direction != "none":
            raise ValueError("a zero prune ratio requires prune_direction 'none'")
        return self


class OptimConfig(Section):
    """Optimizer constants of the search stage."""

    w_lr: float = Field(0.025, gt=0.0)
    w_lr_min: float = Field(0.0, ge=0.0)
    w_momentum: float = Field(0.9, ge=0.0, lt=1.0)
    w_weight_decay: float = Field(4e-5, ge=0.0)
    alpha_lr: float = Field(1e-3, gt=0.0)
    alpha_betas: tuple[float, float] = (0.0, 0.99)
    alpha_weight_decay: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_betas(self) -> "OptimConfig":
        if not all(0.0 <= b < 1.0 for b in self.alpha_betas):
            raise ValueError(f"adaptive-moment betas must lie in [0, 1), got {self.alpha_betas}")
        return self


class SSLConfig(Section):
    temperature: float = Field(0.5, gt=0.0)
    augmentation: AugmentationPolicy = AugmentationPolicy()


class DatasetSpec(Section):
    source: Literal["synthetic", "binary_records"] = "synthetic"
    seed: int = Field(0, ge=0)
    path: str | None = None
    test_path: str | None = None
    classes: int = Field(2, ge=2)
    train_samples: int = Field(2000, ge=2)
    test_samples: int = Field(500, ge=2)
    image_size: int = Field(16, ge=4)
    channels: int = Field(3, ge=1)
    noise: float = Field(0.2, ge=0.0)
    label_bytes: int = Field(1, ge=1)
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    @model_validator(mode="after")
    def _check_source(self) -> "DatasetSpec":
        if self.source == "binary_records" and not (self.path and self.test_path):
            raise ValueError("binary_records datasets need both path and test_path")
        for stats in (self.mean, self.std):
            if stats is not None and len(stats) != self.channels:
                raise ValueError(f"normalization statistics need {self.channels} entries, got {len(stats)}")
        if self.std is not None and min(self.std) <= 0:
            raise ValueError("normalization stds must be positive")
        if (self.mean is None) != (self.std is None):
            raise ValueError("give both mean and std, or neither")
        return self


class TrainConfig(Section):
    """Supervised fine-tuning and the two-stage pre-training baseline."""

    epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(0.025, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(3e-4, ge=0.0)
    grad_clip: float | None = Field(5.0, gt=0.0)
    augment: bool = True
    crop_padding: int = Field(4, ge=0)
    cutout: int = Field(16, ge=0)
    drop_path: float = Field(0.3, ge=0.0, lt=1.0)
    labeled_fraction: float = Field(1.0, gt=0.0, le=1.0)
    init: Literal["random", "concomitant", "two_stage"] = "random"
    pretrain_epochs: int = Field(20, ge=0)


class ProbeConfig(Section):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(0.1, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)


class RunConfig(BaseSettings):
    """Every tunable of a run. Unknown keys are rejected at every level."""

    model_config = SettingsConfigDict(extra="forbid")

    seed: int = Field(0, ge=0, lt=2**64)
    network: NetworkConfig = NetworkConfig()
    search: SearchConfig = SearchConfig()
    optim: OptimConfig = OptimConfig()
    ssl: SSLConfig = SSLConfig()
    dataset: DatasetSpec = DatasetSpec()
    train: TrainConfig = TrainConfig()
    probe: ProbeConfig = ProbeConfig()

    def __init__(self, **values):
        try:
            super().__init__(**values)
        except ValidationError as exc:
            raise ConfigError(f"invalid run configuration:\n{exc}") from exc

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"a run configuration must be a JSON object, got {type(data).__name__}")
    return RunConfig(**data)


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON run configuration; missing keys take their defaults."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    config = config_from_dict(data)
    logger.info("Loaded config %s (hash %s)", path, config_hash(config)[:12])
    return config


def dump_config(config: RunConfig) -> str:
    """Canonical JSON text: sorted keys, 2-space indent, defaults filled in."""
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()


def with_overrides(config: RunConfig, **sections) -> RunConfig:
    """Copy of `config` with some sections updated, e.g. `search={"max_epochs": 3}`.

    Top-level scalars such as `seed` are replaced directly.
    """
    data = config.model_dump(mode="json")
    for key, value in sections.items():
        if isinstance(value, dict):
            if not isinstance(data.get(key), dict):
                raise ConfigError(f"unknown config section {key!r}")
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return config_from_dict(data)
