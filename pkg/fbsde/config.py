"""
Runtime settings for SuperFBSDE
Environment-driven knobs (FBSDE_* variables or a .env file) shared by the CLI and solvers.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional

import psutil
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _default_threads() -> int:
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


class Settings(BaseSettings):
    """Process-wide settings; every field can be overridden with FBSDE_<NAME>."""

    model_config = SettingsConfigDict(env_prefix="FBSDE_", env_file=".env", extra="ignore")

    num_threads: int = Field(default_factory=_default_threads, ge=1)
    log_level: str = "INFO"
    bdg_constant: float = Field(default=4.0, gt=0)      # c1 in the contraction horizon
    schedule_cap: int = Field(default=1_000_000, ge=1)  # nCap for the Δₙ schedule
    contraction_cap: float = Field(default=1e6, gt=0)   # search cap for C2
    validation_samples: int = Field(default=10_000, ge=1)
    output_dir: Path = Path("results")

    @field_validator("log_level")
    @classmethod
    def _check_level(cls, value: str) -> str:
        level = value.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"unknown log level: {value}")
        return level


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Load settings once per process."""
    return Settings()


def configure_logging(level: Optional[str] = None):
    """Configure the root logger the way the CLI and test scripts expect."""
    logging.basicConfig(level=level or get_settings().log_level, format=LOG_FORMAT)
