"""
Base Experiment class for the FracSmith workbench
Provides common functionality for all registered experiments
"""

from abc import ABC, abstractmethod
from datetime import datetime
from typing import Any, ClassVar, List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel

from errors import ArgumentError
from schemas import CatalogEntry, ExperimentConfig, ExperimentKind, ExperimentResult, StudyReport


def to_plain(value: Any) -> Any:
    """Turn reports, numpy scalars/arrays and complex numbers into JSON-ready values."""
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.generic):
        return to_plain(value.item())
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value


class BaseExperiment(ABC):
    """Base class for all experiments run by the harness"""

    kind: ClassVar[ExperimentKind]
    name: ClassVar[str]
    operation: ClassVar[str]
    anchor: ClassVar[str]
    description: ClassVar[str] = ""
    required_inputs: ClassVar[Tuple[str, ...]] = ()

    def __init__(self):
        """Initialize the experiment and announce it in the log"""
        self.label = f"{self.kind.value}/{self.name}"
        # (legend label, report) pairs drawn into study.png by the harness
        self.studies: List[Tuple[str, StudyReport]] = []
        logger.info(f"Initialized {self.label} experiment")

    @classmethod
    def catalog_entry(cls) -> CatalogEntry:
        return CatalogEntry(kind=cls.kind, name=cls.name, operation=cls.operation,
                            anchor=cls.anchor, description=cls.description)

    @abstractmethod
    def execute(self, config: ExperimentConfig,
                rng: np.random.Generator) -> Tuple[ExperimentResult, pd.DataFrame]:
        """
        Run the experiment and return its result with the table for result.csv

        Args:
            config: Validated experiment config
            rng: Generator seeded from the run's seed

        Returns:
            (ExperimentResult, result table)
        """
        pass

    def create_result(
        self,
        success: bool,
        data: Any = None,
        error_message: Optional[str] = None
    ) -> ExperimentResult:
        """
        Create a standardized experiment result

        Args:
            success: Whether every audit passed
            data: Report payload; pydantic reports and numpy values are converted
            error_message: Error message if failed

        Returns:
            Standardized ExperimentResult
        """
        return ExperimentResult(
            experiment=self.name,
            kind=self.kind,
            success=success,
            data=to_plain(data),
            error_message=error_message,
            anchor=self.anchor,
            timestamp=datetime.now()
        )

    def log_activity(self, message: str, level: str = "INFO"):
        """
        Log experiment activity with standardized format

        Args:
            message: Log message
            level: Log level (DEBUG, INFO, WARNING, ERROR)
        """
        log_message = f"[{self.label}] {message}"

        if level.upper() == "DEBUG":
            logger.debug(log_message)
        elif level.upper() == "INFO":
            logger.info(log_message)
        elif level.upper() == "WARNING":
            logger.warning(log_message)
        elif level.upper() == "ERROR":
            logger.error(log_message)
        else:
            logger.info(log_message)

    def validate_config(self, config: ExperimentConfig) -> bool:
        """
        Validate that a config addresses this experiment and names its inputs

        Args:
            config: Experiment config to validate

        Returns:
            True if valid, False otherwise
        """
        if config.kind != self.kind or config.name != self.name:
            self.log_activity(f"Invalid config: addressed to {config.kind.value}/{config.name}", "ERROR")
            return False

        missing = [key for key in self.required_inputs if key not in config.inputs]
        if missing:
            self.log_activity(f"Invalid config: missing inputs {missing}", "ERROR")
            return False

        self.log_activity("Config validated successfully")
        return True

    @staticmethod
    def param(config: ExperimentConfig, key: str, default: Any = None) -> Any:
        """Parameter from the config, falling back to the experiment default."""
        return config.params.get(key, default)

    @staticmethod
    def tolerance(config: ExperimentConfig, key: str, default: float) -> float:
        return float(config.tolerances.get(key, default))

    @staticmethod
    def require(condition: bool, message: str) -> None:
        if not condition:
            raise ArgumentError(message)
