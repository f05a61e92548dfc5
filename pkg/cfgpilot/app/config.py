"""Configuration settings for the guidance controller experiments."""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv
from pydantic import ValidationError

from .models import RunConfig

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Process-level settings taken from the environment."""

    # Directories
    OUTPUT_ROOT = "runs"

    # Execution
    WORKERS = 1
    LOG_LEVEL = "INFO"

    @classmethod
    def load_config(cls):
        """Load configuration from environment variables."""
        cls.OUTPUT_ROOT = os.getenv("CFGPILOT_OUT", cls.OUTPUT_ROOT)
        cls.LOG_LEVEL = os.getenv("CFGPILOT_LOG_LEVEL", cls.LOG_LEVEL).upper()

        workers = os.getenv("CFGPILOT_WORKERS", "")
        if workers:
            try:
                cls.WORKERS = max(1, int(workers))
            except ValueError:
                raise ValueError(f"CFGPILOT_WORKERS must be an integer, got {workers!r}")

        # Create the output root if it doesn't exist
        os.makedirs(cls.OUTPUT_ROOT, exist_ok=True)

        return cls


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional JSON file and CLI overrides.

    Unknown keys and a mismatched schema_version are rejected; missing keys take their defaults.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError(f"config file {path} must contain a JSON object")

    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ValueError(f"invalid config at {where}: {first['msg']}") from e

    if config.out_dir is None:
        config.out_dir = Config.OUTPUT_ROOT
    if "workers" not in data:
        config.workers = Config.WORKERS
    return config


def dump_run_config(config: RunConfig) -> str:
    """Serialize a RunConfig to its JSON document."""
    return config.model_dump_json(indent=2)


def save_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_run_config(config), encoding="utf-8")
    logger.info("Wrote run config to %s", path)
    return path


# Load configuration on import
Config.load_config()
