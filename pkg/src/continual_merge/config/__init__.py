"""
Continual Merge Configuration Module

Layered configuration for benchmark runs: built-in defaults, JSON/YAML config
files, a .env file, CMERGE_* environment variables and finally command-line
overrides. The merged mapping is validated into a RunConfig before any work
starts.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError
from pydantic import field_validator, model_validator

from ..errors import ConfigurationError

ENV_PREFIX = "CMERGE_"

METHODS = ("swa", "ta", "ties", "magmax", "opcm", "mingle")

# fields taking a list; a single environment value becomes a one-element list
_LIST_FIELDS = ("methods", "noise_sigmas", "gated_layers")


class RunConfig(BaseModel):
    """Every tunable of a benchmark run. Defaults are the desk-scale setup."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Task suite
    num_tasks: int = Field(4, ge=1)
    classes_per_task: int = Field(3, ge=2)
    input_dim: int = Field(16, ge=1)
    train_per_class: int = Field(100, ge=1)
    test_per_class: int = Field(200, ge=1)
    margin: float = Field(4.0, gt=0)
    task_spread: float = Field(6.0, ge=0)
    intrinsic_dim: Optional[int] = Field(None, ge=1)
    suite_seed: int = 0

    # Backbone and fine-tuning
    hidden_width: int = Field(32, ge=1)
    temperature: float = Field(20.0, gt=0)
    finetune_steps: int = Field(200, ge=1)
    finetune_lr: float = Field(0.05, ge=0)
    finetune_mode: Literal["independent", "sequential"] = "independent"

    # Gated low-rank experts and test-time adaptation
    rank: int = Field(4, ge=1)
    subspace_k: int = Field(3, ge=1)
    gamma: float = Field(1.0, gt=0)
    beta: float = Field(0.99, ge=0, lt=1)
    tta_steps: int = Field(50, ge=0)
    tta_lr: float = Field(5e-3, ge=0)
    batch_size: int = Field(16, ge=1)
    seeds_per_class: int = Field(5, ge=1)
    projection: Literal["none", "hard", "relaxed"] = "relaxed"
    trainable_gates: Literal["newest", "all"] = "newest"
    fixed_gates: bool = False
    learn_gate_bias: bool = True
    gated_layers: Optional[List[int]] = None

    # Baseline mergers
    methods: List[str] = Field(default_factory=lambda: ["mingle"])
    ta_scale: float = Field(0.3, gt=0)
    accumulated_scale: float = Field(1.0, gt=0)
    trim_fraction: float = Field(0.2, gt=0, le=1)
    lambda_rule: Literal["sqrt", "linear", "constant"] = "sqrt"

    # Sweep and outputs
    orders: int = Field(1, ge=1)
    base_seed: int = 42
    jobs: int = Field(1, ge=1)
    noise_sigmas: List[float] = Field(default_factory=list)
    output_dir: str = "runs"
    suite_path: Optional[str] = None
    trace: bool = False
    log_level: str = "INFO"

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, value: List[str]) -> List[str]:
        unknown = [m for m in value if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; available: {list(METHODS)}")
        if not value:
            raise ValueError("at least one method is required")
        return value

    @field_validator("noise_sigmas")
    @classmethod
    def _non_negative_sigmas(cls, value: List[float]) -> List[float]:
        if any(s < 0 for s in value):
            raise ValueError("noise sigmas must be non-negative")
        return value

    @field_validator("log_level")
    @classmethod
    def _valid_log_level(cls, value: str) -> str:
        if not ConfigValidator.validate_log_level(value):
            raise ValueError(f"invalid log level {value}")
        return value.upper()

    @model_validator(mode="after")
    def _dimensions_fit(self) -> "RunConfig":
        if self.rank > min(self.input_dim, self.hidden_width):
            raise ValueError(
                f"rank {self.rank} exceeds the smallest layer dimension "
                f"{min(self.input_dim, self.hidden_width)}"
            )
        if self.intrinsic_dim is not None and self.intrinsic_dim > self.input_dim:
            raise ValueError("intrinsic_dim cannot exceed input_dim")
        if self.gated_layers is not None:
            depth = len(self.layer_sizes) - 1
            bad = [i for i in self.gated_layers if not 0 <= i < depth]
            if bad:
                raise ValueError(f"gated_layers {bad} outside the {depth} backbone layers")
        return self

    def provenance(self) -> Dict[str, Any]:
        """Fields that shape results; worker count and output locations are left out"""
        return self.model_dump(mode="json", exclude={"jobs", "output_dir", "log_level", "trace", "suite_path"})

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Validated copy with some fields replaced"""
        return RunConfig.model_validate({**self.model_dump(), **overrides})

    @property
    def layer_sizes(self) -> List[int]:
        """Input, two hidden layers and the feature layer"""
        return [self.input_dim, self.hidden_width, self.hidden_width, self.hidden_width]


class ConfigLoader:
    """
    Configuration loader with multiple source support

    Supports:
    - Environment variables (CMERGE_ prefix)
    - .env files
    - JSON/YAML config files
    - Runtime configuration
    """

    def __init__(self, config_dir: Optional[str] = None):
        """
        Initialize configuration loader

        Args:
            config_dir: Directory to resolve relative config files against
        """
        self.config_dir = Path(config_dir) if config_dir else Path.cwd()
        self.config: Dict[str, Any] = {}
        self.env_loaded = False

    def load_env(self, env_file: str = ".env") -> "ConfigLoader":
        """Load environment variables from a .env file if present"""
        env_path = self.config_dir / env_file
        if env_path.exists():
            load_dotenv(env_path)
            self.env_loaded = True
        return self

    def load_file(self, config_file: Union[str, Path]) -> "ConfigLoader":
        """
        Load configuration from JSON or YAML file

        Args:
            config_file: Path to configuration file
        """
        config_path = Path(config_file)
        if not config_path.is_absolute():
            config_path = self.config_dir / config_path
        if not config_path.exists():
            raise ConfigurationError(f"Config file not found: {config_path}")

        with open(config_path, "r", encoding="utf-8") as f:
            if config_path.suffix == ".json":
                file_config = json.load(f)
            elif config_path.suffix in (".yml", ".yaml"):
                file_config = yaml.safe_load(f) or {}
            else:
                raise ConfigurationError(f"Unsupported config file format: {config_path.name}")

        if not isinstance(file_config, dict):
            raise ConfigurationError(f"Config file {config_path.name} must hold a mapping")

        self.config.update(file_config)
        return self

    def set(self, key: str, value: Any) -> "ConfigLoader":
        """Set configuration value"""
        self.config[key] = value
        return self

    def update(self, overrides: Dict[str, Any]) -> "ConfigLoader":
        """Apply overrides, skipping unset (None) values"""
        for key, value in overrides.items():
            if value is not None:
                self.config[key] = value
        return self

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value with environment variable fallback

        Checks in order: runtime config -> environment variables -> default
        """
        if key in self.config:
            return self.config[key]

        env_value = os.getenv(ENV_PREFIX + key.upper())
        if env_value is not None:
            return self._parse_env_value(env_value)

        return default

    def environment_overrides(self) -> Dict[str, Any]:
        """All CMERGE_* variables that name a RunConfig field"""
        overrides: Dict[str, Any] = {}
        for name in RunConfig.model_fields:
            env_value = os.getenv(ENV_PREFIX + name.upper())
            if env_value is not None:
                value = self._parse_env_value(env_value)
                if name in _LIST_FIELDS and not isinstance(value, list):
                    value = [value]
                overrides[name] = value
        return overrides

    def to_dict(self) -> Dict[str, Any]:
        """Return all configuration as dictionary"""
        return self.config.copy()

    def build(self, cli_overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        """
        Validate the layered configuration into a RunConfig

        Precedence: defaults < config file < environment < cli_overrides.

        Raises:
            ConfigurationError: If any field fails validation
        """
        merged = {**self.config, **self.environment_overrides()}
        for key, value in (cli_overrides or {}).items():
            if value is not None:
                merged[key] = value
        try:
            return RunConfig.model_validate(merged)
        except PydanticValidationError as e:
            first = e.errors()[0]
            key = ".".join(str(part) for part in first.get("loc", ())) or None
            raise ConfigurationError(f"Invalid configuration: {first['msg']}", config_key=key) from e

    @staticmethod
    def _parse_env_value(value: str) -> Union[str, int, float, bool, List[Any]]:
        """Parse environment variable value to appropriate type"""
        if value.lower() in ("true", "yes"):
            return True
        if value.lower() in ("false", "no"):
            return False

        if "," in value:
            return [ConfigLoader._parse_env_value(part.strip()) for part in value.split(",")]

        try:
            if "." in value or "e" in value.lower():
                return float(value)
            return int(value)
        except ValueError:
            pass

        return value


class ConfigValidator:
    """Configuration validation utilities"""

    @staticmethod
    def validate_log_level(level: str) -> bool:
        """Validate log level"""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        return level.upper() in valid_levels


def create_run_config(**kwargs: Any) -> RunConfig:
    """
    Factory function to create a validated run configuration

    Args:
        **kwargs: RunConfig fields to override

    Returns:
        RunConfig: Validated configuration
    """
    return ConfigLoader().build(kwargs)
