"""
Configuration for the MH2F-Net deraining toolkit.
Typed model/training/rain settings (pydantic), environment settings,
logging setup and the shared exception hierarchy.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

# Environment configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
DETERMINISTIC_ENV = os.getenv("MH2F_DETERMINISTIC")
NUM_THREADS_ENV = os.getenv("MH2F_NUM_THREADS")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for CLI and scripts."""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
    )


def env_flag(value: Optional[str]) -> Optional[bool]:
    """
    Parse a boolean environment value.
    Returns None when unset so callers can keep their own default.
    """
    if value is None or not value.strip():
        return None
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"Invalid boolean value {value!r} (expected 1/0, true/false, yes/no)")


# ----- Exceptions -----

class MH2FError(Exception):
    """Base class for all toolkit errors."""
    pass


class ConfigurationError(MH2FError, ValueError):
    """Invalid configuration or parameter/input channel mismatch."""
    pass


class PreconditionError(MH2FError, ValueError):
    """Input violates an operation's precondition (shape, range, divisibility)."""
    pass


# ----- Dataset presets -----

# Benchmark dataset sizes and epoch counts (train pairs, test pairs, epochs).
DATASET_PRESETS: Dict[str, Dict[str, int]] = {
    "rain200l": {"train_pairs": 1800, "test_pairs": 200, "epochs": 200},
    "rain200h": {"train_pairs": 1800, "test_pairs": 200, "epochs": 200},
    "rain1400": {"train_pairs": 12600, "test_pairs": 1400, "epochs": 100},
    "spa": {"train_pairs": 638492, "test_pairs": 1000, "epochs": 25},
}


# ----- Config models -----

class ModelConfig(BaseModel):
    """Architecture hyperparameters of MH2F-Net."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_mheb: int = 8
    base_channels: int = 32
    dcr_units_per_stream: int = 2
    dcr_layers: int = 3
    dcr_growth: Optional[int] = None
    attention_reduction: int = 4
    spatial_kernel: int = 7
    fusion_mode: Literal["rpf", "add", "concat"] = "rpf"
    use_hadb: bool = True
    seed: int = 0

    @property
    def growth(self) -> int:
        """DCR growth rate; defaults to half the base width."""
        if self.dcr_growth is not None:
            return self.dcr_growth
        return max(1, self.base_channels // 2)

    def violations(self) -> List[str]:
        problems = []
        if self.num_mheb < 1:
            problems.append(f"num_mheb must be >= 1 (got {self.num_mheb})")
        elif self.num_mheb < 2:
            # both distillation paths consume L_h^1..L_h^{N-1}
            path = "HADB" if self.use_hadb else "concat distillation"
            problems.append(f"num_mheb must be >= 2 when {path} is used (got {self.num_mheb})")
        if self.base_channels < 4:
            problems.append(f"base_channels must be >= 4 (got {self.base_channels})")
        if self.dcr_units_per_stream < 1:
            problems.append(f"dcr_units_per_stream must be >= 1 (got {self.dcr_units_per_stream})")
        if self.dcr_layers < 1:
            problems.append(f"dcr_layers must be >= 1 (got {self.dcr_layers})")
        if self.dcr_growth is not None and self.dcr_growth < 1:
            problems.append(f"dcr_growth must be >= 1 (got {self.dcr_growth})")
        if self.attention_reduction < 1:
            problems.append(f"attention_reduction must be >= 1 (got {self.attention_reduction})")
        elif self.base_channels % self.attention_reduction != 0:
            problems.append(
                f"base_channels ({self.base_channels}) must be divisible by "
                f"attention_reduction ({self.attention_reduction})"
            )
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            problems.append(f"spatial_kernel must be a positive odd integer (got {self.spatial_kernel})")
        return problems

    @model_validator(mode="after")
    def _check_invariants(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))
        return self


class TrainConfig(BaseModel):
    """Optimization settings; Adam hyperparameters default to the published values."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    patch_size: int = 64
    epochs: int = 5
    lam: float = Field(0.2, alias="lambda")
    seed: int = 0
    deterministic: bool = True
    max_iterations: Optional[int] = None
    log_every: int = 10
    dataset_preset: Optional[str] = None
    # decoded images held in memory; None keeps the whole dataset
    cache_images: Optional[int] = 4096
    model: ModelConfig = Field(default_factory=ModelConfig)

    def violations(self) -> List[str]:
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr})")
        if not 0 <= self.beta1 < 1:
            problems.append(f"beta1 must be in [0, 1) (got {self.beta1})")
        if not 0 <= self.beta2 < 1:
            problems.append(f"beta2 must be in [0, 1) (got {self.beta2})")
        if not self.eps > 0:
            problems.append(f"eps must be > 0 (got {self.eps})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.patch_size < 12 or self.patch_size % 4 != 0:
            # the SSIM term needs room for its 11x11 window
            problems.append(f"patch_size must be >= 12 and divisible by 4 (got {self.patch_size})")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1 (got {self.epochs})")
        if self.lam < 0:
            problems.append(f"lambda must be >= 0 (got {self.lam})")
        if self.max_iterations is not None and self.max_iterations < 1:
            problems.append(f"max_iterations must be >= 1 (got {self.max_iterations})")
        if self.log_every < 1:
            problems.append(f"log_every must be >= 1 (got {self.log_every})")
        if self.cache_images is not None and self.cache_images < 2:
            problems.append(f"cache_images must be >= 2 or null (got {self.cache_images})")
        if self.dataset_preset is not None and self.dataset_preset not in DATASET_PRESETS:
            problems.append(
                f"unknown dataset_preset {self.dataset_preset!r} "
                f"(valid: {', '.join(sorted(DATASET_PRESETS))})"
            )
        return problems

    @model_validator(mode="after")
    def _check_invariants(self) -> "TrainConfig":
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def summary(self) -> str:
        """One-line echo of the headline training settings."""
        return (
            f"lr={self.lr:g} batch={self.batch_size} patch={self.patch_size} "
            f"lambda={self.lam:g} N={self.model.num_mheb} C={self.model.base_channels} "
            f"fusion={self.model.fusion_mode} hadb={self.model.use_hadb} "
            f"epochs={self.epochs} seed={self.seed} deterministic={self.deterministic}"
        )


class RainParams(BaseModel):
    """Parametric description of one synthetic rain field."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    angle_deg: float = Field(0.0, ge=-45.0, le=45.0)
    length_px: int = Field(9, ge=1)
    density: float = Field(0.02, ge=0.0, le=1.0)
    intensity: float = Field(0.8, ge=0.0, le=1.0)
    intensity_jitter: float = Field(0.0, ge=0.0, le=1.0)
    seed: int = 0


# ----- Validation helpers -----

def format_validation_error(error: ValidationError) -> str:
    """Flatten a pydantic ValidationError into 'field: message' items."""
    items = []
    for detail in error.errors():
        location = ".".join(str(part) for part in detail.get("loc", ())) or "config"
        message = detail.get("msg", "invalid value")
        # pydantic prefixes validator ValueErrors
        message = message.removeprefix("Value error, ")
        items.append(f"{location}: {message}")
    return "; ".join(items)


def parse_config(cls, data: Mapping[str, Any]):
    """
    Build a config model from a mapping, raising ConfigurationError on any problem.

    Args:
        cls: ModelConfig, TrainConfig or RainParams
        data: Raw key/value mapping (e.g. a JSON section)

    Returns:
        Validated, frozen config instance

    Raises:
        ConfigurationError: Listing every violation
    """
    try:
        return cls.model_validate(dict(data))
    except ValidationError as e:
        raise ConfigurationError(f"Invalid {cls.__name__}: {format_validation_error(e)}") from e


def validate_model_config(config: ModelConfig) -> ModelConfig:
    """
    Re-check a ModelConfig (instances produced by model_copy skip validation).

    Raises:
        ConfigurationError: Listing every violation
    """
    problems = config.violations()
    if problems:
        raise ConfigurationError("Invalid ModelConfig: " + "; ".join(problems))
    return config


def validate_train_config(config: TrainConfig) -> TrainConfig:
    """Re-check a TrainConfig and its nested ModelConfig."""
    problems = config.violations() + config.model.violations()
    if problems:
        raise ConfigurationError("Invalid TrainConfig: " + "; ".join(problems))
    return config


# ----- Config files and overrides -----

CONFIG_SECTIONS = ("model", "train", "rain")


def load_config_file(path: Optional[str]) -> Dict[str, Dict[str, Any]]:
    """
    Read a JSON config file with optional 'model', 'train' and 'rain' sections.
    Unknown sections are hard errors; unknown keys are rejected later by the models.
    """
    if path is None:
        return {section: {} for section in CONFIG_SECTIONS}

    file_path = Path(path)
    try:
        raw = json.loads(file_path.read_text())
    except FileNotFoundError as e:
        raise ConfigurationError(f"Config file not found: {file_path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {file_path} is not valid JSON: {e}") from e

    if not isinstance(raw, dict):
        raise ConfigurationError(f"Config file {file_path} must contain a JSON object")

    unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigurationError(
            f"Unknown config section(s) in {file_path}: {', '.join(unknown)} "
            f"(valid: {', '.join(CONFIG_SECTIONS)})"
        )

    sections = {}
    for section in CONFIG_SECTIONS:
        value = raw.get(section, {})
        if not isinstance(value, dict):
            raise ConfigurationError(f"Config section '{section}' must be a JSON object")
        sections[section] = dict(value)
    return sections


def build_train_config(
    sections: Mapping[str, Mapping[str, Any]],
    overrides: Optional[Mapping[str, Any]] = None,
) -> TrainConfig:
    """
    Merge defaults < environment < file < flags into a TrainConfig.

    Args:
        sections: Output of load_config_file
        overrides: Dotted keys from the command line, e.g. {"model.num_mheb": 4}

    Returns:
        Validated TrainConfig
    """
    train_values = dict(sections.get("train", {}))
    model_values = dict(sections.get("model", {}))
    if "model" in train_values:
        raise ConfigurationError("Put model settings in the top-level 'model' section, not under 'train'")

    env_deterministic = env_flag(DETERMINISTIC_ENV)
    if env_deterministic is not None:
        train_values["deterministic"] = env_deterministic

    preset = (overrides or {}).get("train.dataset_preset", train_values.get("dataset_preset"))
    if preset is not None and "epochs" not in train_values and preset in DATASET_PRESETS:
        train_values["epochs"] = DATASET_PRESETS[preset]["epochs"]

    for key, value in (overrides or {}).items():
        section, _, field = key.partition(".")
        if section == "train":
            train_values[field] = value
        elif section == "model":
            model_values[field] = value
        else:
            raise ConfigurationError(f"Unknown override '{key}'")

    model = parse_config(ModelConfig, model_values)
    train_values["model"] = model
    return parse_config(TrainConfig, train_values)


def config_as_dict(config: BaseModel) -> Dict[str, Any]:
    """Canonical, alias-keyed dict form used for echoing and checkpoints."""
    return config.model_dump(mode="json", by_alias=True)


def canonical_json(data: Any) -> str:
    """Deterministic JSON text (sorted keys, no whitespace)."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def field_overrides(model_cls, prefix: str) -> List[Tuple[str, str, Any]]:
    """
    List (flag, dest, annotation) for every field of a config model.
    Used by the CLI to generate dotted override flags.
    """
    flags = []
    for name, field in model_cls.model_fields.items():
        if name == "model":
            continue
        key = field.alias or name
        flags.append((f"--{prefix}.{key}", f"{prefix}.{key}", field.annotation))
    return flags
