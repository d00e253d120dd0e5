"""
Configuration management for the FracSmith workbench.
"""
import json
import os
from pathlib import Path
from typing import Union

from dotenv import load_dotenv
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ArgumentError
from schemas import ExperimentConfig

# Load environment variables from .env file
load_dotenv()


class WorkbenchSettings(BaseSettings):
    """Process-wide settings read from FRACSMITH_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="FRACSMITH_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    log_dir: str = "logs"
    output_dir: str = "results"
    default_seed: int = 0
    debug: bool = False


class Config:
    """Configuration class for managing workbench settings."""

    _settings = WorkbenchSettings()

    # Settings
    LOG_LEVEL = _settings.log_level
    LOG_DIR = _settings.log_dir
    OUTPUT_DIR = _settings.output_dir
    DEFAULT_SEED = _settings.default_seed
    DEBUG = _settings.debug or os.getenv('DEBUG', 'False').lower() == 'true'

    @classmethod
    def validate_output_dir(cls, path: Union[str, Path, None] = None) -> Path:
        """Create the output directory if needed and return it."""
        out = Path(path or cls.OUTPUT_DIR)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArgumentError(f"Cannot create output directory {out}: {e}")
        return out


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Load and validate an experiment config from JSON.

    Relative input paths are resolved against the config file's directory.

    Args:
        path: Path to the JSON config

    Returns:
        Validated ExperimentConfig
    """
    path = Path(path)
    if not path.is_file():
        raise ArgumentError(f"Config file not found: {path}")

    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ArgumentError(f"Config {path} is not valid JSON: {e}")

    try:
        config = ExperimentConfig(**raw)
    except ValidationError as e:
        raise ArgumentError(f"Config {path} failed validation: {e}")

    resolved = {}
    for key, value in config.inputs.items():
        candidate = Path(value)
        if not candidate.is_absolute():
            candidate = path.parent / candidate
        if not candidate.exists():
            raise ArgumentError(f"Input '{key}' does not exist: {candidate}")
        resolved[key] = str(candidate)

    return config.model_copy(update={"inputs": resolved})
