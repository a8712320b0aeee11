"""Configuration management for Caption Lens."""

import logging
import logging.handlers
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

from caption_lens.core.exceptions import ConfigurationError
from caption_lens.model.decoder import DecoderConfig
from caption_lens.model.encoder import EncoderConfig

_STRICT = ConfigDict(extra="forbid")


class ModelConfig(BaseModel):
    """Captioner shape and ablation switches. Encoder and decoder share depth."""

    model_config = _STRICT

    layers: int = Field(default=3, ge=1, le=12)
    d_model: int = Field(default=512, ge=2)
    heads: int = Field(default=8, ge=1)
    d_ff: int = Field(default=2048, ge=1)
    keep_prob: float = Field(default=0.9, gt=0.0, le=1.0)
    intra_layer: str = Field(default="gea", pattern="^(plain|g0|gea)$")
    inter_layer: str = Field(default="lstm", pattern="^(none|average|attention|lstm)$")
    controller: str = Field(default="mac", pattern="^(gac|mac|plain)$")
    max_len: int = Field(default=20, ge=2)  # decoder input positions

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            layers=self.layers,
            d_model=self.d_model,
            heads=self.heads,
            d_ff=self.d_ff,
            keep_prob=self.keep_prob,
            intra_layer=self.intra_layer,
            inter_layer=self.inter_layer,
        )

    def decoder_config(self, vocab_size: int) -> DecoderConfig:
        return DecoderConfig(
            layers=self.layers,
            d_model=self.d_model,
            heads=self.heads,
            d_ff=self.d_ff,
            vocab_size=vocab_size,
            max_len=self.max_len,
            keep_prob=self.keep_prob,
            controller=self.controller,
        )


class TrainConfig(BaseModel):
    """XE pre-training and SCST fine-tuning."""

    model_config = _STRICT

    batch_size: int = Field(default=50, ge=1)
    warmup_steps: int = Field(default=10_000, ge=1)
    lr_factor: float = Field(default=1.0, gt=0.0)
    xe_epochs: int = Field(default=20, ge=1)
    xe_max_steps: int | None = Field(default=None, ge=1)
    scst_lr: float = Field(default=5e-6, gt=0.0)
    scst_steps: int = Field(default=1000, ge=1)
    scst_beam: int = Field(default=5, ge=2)
    clip_norm: float = Field(default=5.0, gt=0.0)
    checkpoint_every: int = Field(default=1000, ge=1)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-9, gt=0.0)


class SyntheticConfig(BaseModel):
    """Parameters of the synthetic generator."""

    model_config = _STRICT

    images: int = Field(default=200, ge=1)
    regions: int = Field(default=3, ge=1)
    d_in: int = Field(default=16, ge=1)
    vocab_size: int = Field(default=30, ge=5)
    caption_len: int = Field(default=6, ge=1)


class DataConfig(BaseModel):
    """Where captions and features come from."""

    model_config = _STRICT

    source: str = Field(default="synthetic", pattern="^(synthetic|files)$")
    captions_path: Path | None = None
    manifest_path: Path | None = None
    val_captions_path: Path | None = None
    val_manifest_path: Path | None = None
    min_count: int = Field(default=1, ge=1)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def check_paths(self) -> "DataConfig":
        if self.source == "files" and (
            self.captions_path is None or self.manifest_path is None
        ):
            raise ValueError("files source needs captions_path and manifest_path")
        return self


class InferenceConfig(BaseModel):
    """Decoding and attribution."""

    model_config = _STRICT

    beam_size: int = Field(default=3, ge=1)
    max_caption_len: int = Field(default=20, ge=1)
    attribution_steps: int = Field(default=64, ge=1)
    attribution_rule: str = Field(
        default="adaptive", pattern="^(right|midpoint|trapezoid|adaptive)$"
    )
    attribution_tolerance: float = Field(default=0.01, gt=0.0, lt=1.0)
    attribution_max_evaluations: int | None = Field(default=None, ge=1)


class GradCheckConfig(BaseModel):
    """Size of the tiny end-to-end instance checked by ``gradcheck``."""

    model_config = _STRICT

    regions: int = Field(default=3, ge=1)
    d_in: int = Field(default=6, ge=1)
    d_model: int = Field(default=8, ge=2)
    heads: int = Field(default=2, ge=1)
    layers: int = Field(default=2, ge=1)
    d_ff: int = Field(default=16, ge=1)
    vocab_size: int = Field(default=7, ge=5)
    caption_len: int = Field(default=2, ge=1)
    step: float = Field(default=1e-5, gt=0.0)
    tolerance: float = Field(default=1e-4, gt=0.0)
    abs_floor: float = Field(default=1e-2, gt=0.0)
    max_entries: int | None = Field(default=None, ge=1)


class LoggingConfig(BaseModel):
    """Logging configuration."""

    model_config = _STRICT

    level: str = Field(default="INFO")
    format: str = Field(default="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    file_enabled: bool = Field(default=True)
    file_name: str = Field(default="caption_lens.log")
    max_bytes: int = Field(default=10_000_000)  # 10MB
    backup_count: int = Field(default=5)
    console_enabled: bool = Field(default=True)

    @model_validator(mode="after")
    def validate_level(self) -> "LoggingConfig":
        valid_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        if self.level.upper() not in valid_levels:
            raise ValueError(f"Invalid log level: {self.level}")
        self.level = self.level.upper()
        return self


class RunConfig(BaseSettings):
    """Main configuration for a Caption Lens run."""

    model_config = SettingsConfigDict(
        env_prefix="CAPTION_LENS_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="forbid",
        env_nested_delimiter="__",
    )

    run_name: str = Field(default="get", min_length=1)
    output_dir: Path = Field(default=Path("out"))
    seed: int = Field(default=0, ge=0)

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    gradcheck: GradCheckConfig = Field(default_factory=GradCheckConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # Environment overrides values read from the YAML file.
        return env_settings, dotenv_settings, init_settings, file_secret_settings

    @model_validator(mode="after")
    def check_lengths(self) -> "RunConfig":
        if self.inference.max_caption_len > self.model.max_len:
            raise ValueError(
                f"inference.max_caption_len {self.inference.max_caption_len} "
                f"exceeds model.max_len {self.model.max_len}"
            )
        if (
            self.data.source == "synthetic"
            and self.data.synthetic.caption_len + 1 > self.model.max_len
        ):
            raise ValueError(
                f"synthetic caption_len {self.data.synthetic.caption_len} needs "
                f"model.max_len >= {self.data.synthetic.caption_len + 1}"
            )
        return self

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.run_name


def _violations(error: ValidationError) -> list[str]:
    return [
        f"{'.'.join(str(p) for p in e['loc']) or 'config'}: {e['msg']}"
        for e in error.errors()
    ]


def build_config(data: dict[str, Any] | None = None) -> RunConfig:
    """
    Validate a config mapping; environment variables override its values.

    Raises:
        ConfigurationError: Listing every violated constraint
    """
    try:
        return RunConfig(**(data or {}))
    except ValidationError as e:
        raise ConfigurationError(
            "Invalid configuration",
            details={"violations": _violations(e)},
            cause=e,
        ) from e


def load_config(config_path: Path | None = None) -> RunConfig:
    """
    Load configuration from a YAML file and environment variables.

    Args:
        config_path: Path to YAML config file. If None, uses default locations.

    Returns:
        Validated configuration.

    Raises:
        ConfigurationError: If the file is missing, unreadable or invalid
    """
    if config_path is None:
        possible_paths = [
            Path("config/config.yaml"),
            Path("config.yaml"),
            Path.home() / ".caption-lens" / "config.yaml",
        ]
        config_path = next((p for p in possible_paths if p.exists()), None)
        if config_path is None:
            return build_config()
    elif not config_path.exists():
        raise ConfigurationError(
            f"Config file not found: {config_path}", file_path=config_path
        )

    try:
        with open(config_path, encoding="utf-8") as f:
            config_data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(
            f"Config file is not valid YAML: {e}", file_path=config_path, cause=e
        ) from e
    if not isinstance(config_data, dict):
        raise ConfigurationError(
            "Config file must contain a mapping", file_path=config_path
        )

    try:
        return build_config(config_data)
    except ConfigurationError as e:
        e.file_path = config_path
        raise


def override_config(config: RunConfig, **updates: Any) -> RunConfig:
    """
    Apply dotted-key overrides (``{"train.scst_beam": 3}``) and revalidate.

    ``None`` values are skipped so unset CLI flags leave the config alone.
    """
    data = config.model_dump(mode="json")
    for dotted, value in updates.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        section = data
        for key in parents:
            section = section[key]
        section[leaf] = value if not isinstance(value, Path) else str(value)
    return build_config(data)


def save_config(config: RunConfig, config_path: Path) -> None:
    """
    Save configuration to YAML file.

    Args:
        config: Configuration object to save.
        config_path: Path where to save the config file.
    """
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_dict = config.model_dump(mode="json")

    with open(config_path, "w", encoding="utf-8") as f:
        yaml.dump(
            config_dict,
            f,
            default_flow_style=False,
            indent=2,
            sort_keys=False,
        )


def setup_logging(config: LoggingConfig, log_dir: Path | None = None) -> None:
    """
    Set up logging based on configuration.

    Args:
        config: Logging configuration.
        log_dir: Directory for the rotating log file; no file handler if None.
    """
    logger = logging.getLogger("caption_lens")
    logger.setLevel(getattr(logging, config.level))
    logger.handlers.clear()

    formatter = logging.Formatter(config.format)

    if config.console_enabled:
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    if config.file_enabled and log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_dir / config.file_name,
            maxBytes=config.max_bytes,
            backupCount=config.backup_count,
            encoding="utf-8",
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)


def validate_config(config: RunConfig) -> tuple[bool, list[str]]:
    """
    Check what schema validation cannot: referenced files must exist.

    Args:
        config: Configuration to validate.

    Returns:
        Tuple of (is_valid, list of error messages).
    """
    errors: list[str] = []

    if config.data.source == "files":
        for key in ("captions_path", "manifest_path", "val_captions_path", "val_manifest_path"):
            path = getattr(config.data, key)
            if path is not None and not path.exists():
                errors.append(f"data.{key}: file not found: {path}")
        if (config.data.val_captions_path is None) != (config.data.val_manifest_path is None):
            errors.append("data: val_captions_path and val_manifest_path go together")

    try:
        config.run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        errors.append(f"Cannot create run directory {config.run_dir}: {e}")

    return len(errors) == 0, errors


def require_valid(config: RunConfig) -> RunConfig:
    """Raise ConfigurationError listing every problem :func:`validate_config` finds."""
    is_valid, errors = validate_config(config)
    if not is_valid:
        raise ConfigurationError("Invalid configuration", details={"violations": errors})
    return config


def create_default_config_file(output_path: Path) -> None:
    """
    Create a default configuration file at the specified path.

    Args:
        output_path: Path where to create the config file.
    """
    save_config(RunConfig(), output_path)
    logging.getLogger(__name__).info(f"Default config created at {output_path}")


def get_config_schema() -> dict[str, Any]:
    """JSON schema for RunConfig."""
    return RunConfig.model_json_schema()
