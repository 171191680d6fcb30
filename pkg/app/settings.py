"""
Runtime settings and logging bootstrap.

Settings come from ``config.yaml`` (or the file named by ``OFFLOAD_CONFIG``),
with environment variables (optionally from a ``.env`` file) taking priority.
"""

from __future__ import annotations

import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # python-dotenv not installed

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATHS = ["config.yaml", "config/config.yaml"]


class LoggingSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: Optional[str] = None
    max_bytes: int = 10 * 1024 * 1024
    backup_count: int = 5


class SolverSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: str = "auto"
    n_grid: int = 5
    node_limit: int = 20000
    integrality_tol: float = 1e-6
    feasibility_tol: float = 1e-8
    gap_tol: float = 0.0
    epsilon: float = 0.999


class ServiceSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    runs_db: str = "runs.db"
    artifacts_dir: str = "artifacts"
    workers: int = 1


class Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    logging: LoggingSettings = Field(default_factory=LoggingSettings)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    service: ServiceSettings = Field(default_factory=ServiceSettings)


def _load_config(path: Optional[str] = None) -> Optional[Dict[str, Any]]:
    """Load the settings file, trying the known locations in order."""
    config_paths = [path] if path else ([os.getenv("OFFLOAD_CONFIG")] if os.getenv("OFFLOAD_CONFIG") else DEFAULT_CONFIG_PATHS)
    for candidate in config_paths:
        if candidate and os.path.exists(candidate):
            try:
                with open(candidate, "r") as f:
                    return yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse settings file {candidate}: {e}") from e
    return None


def load_settings(path: Optional[str] = None) -> Settings:
    """Resolve settings: file values first, then environment overrides."""
    raw = _load_config(path) or {}
    try:
        settings = Settings.model_validate(raw)
    except Exception as e:
        raise ConfigError(f"invalid settings: {e}") from e

    if os.getenv("OFFLOAD_LOG_LEVEL"):
        settings.logging.level = os.environ["OFFLOAD_LOG_LEVEL"]
    if os.getenv("OFFLOAD_LOG_FILE"):
        settings.logging.file = os.environ["OFFLOAD_LOG_FILE"]
    if os.getenv("OFFLOAD_RUNS_DB"):
        settings.service.runs_db = os.environ["OFFLOAD_RUNS_DB"]
    if os.getenv("ARTIFACTS_DIR"):
        settings.service.artifacts_dir = os.environ["ARTIFACTS_DIR"]
    if os.getenv("OFFLOAD_SOLVER_BACKEND"):
        settings.solver.backend = os.environ["OFFLOAD_SOLVER_BACKEND"]
    return settings


def configure_logging(settings: Optional[LoggingSettings] = None) -> None:
    """Configure root logging once from the ``logging`` settings block."""
    settings = settings or load_settings().logging
    level = getattr(logging, str(settings.level).upper(), logging.INFO)
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if settings.file:
        Path(settings.file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(
            RotatingFileHandler(settings.file, maxBytes=settings.max_bytes, backupCount=settings.backup_count)
        )
    logging.basicConfig(level=level, format=settings.format, handlers=handlers, force=True)
    logger.debug(f"Logging configured at {logging.getLevelName(level)}")
