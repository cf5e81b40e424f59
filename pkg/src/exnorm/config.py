"""Configuration definition."""

__all__ = ["Configuration", "read_config_file", "write_config_file"]

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping

from exnorm.types import ConfigFileError


@dataclass
class Configuration:
    """Process-level configuration for exnorm."""

    profile: str = field(
        default_factory=lambda: os.getenv("EXNORM_PROFILE", "development")
    )
    """Logging profile: "development" or "production".

    Set with the ``EXNORM_PROFILE`` environment variable.
    """

    log_level: str = field(
        default_factory=lambda: os.getenv("EXNORM_LOG_LEVEL", "INFO")
    )
    """The log level of the package logger.

    Set with the ``EXNORM_LOG_LEVEL`` environment variable.
    """

    logger_name: str = field(
        default_factory=lambda: os.getenv("EXNORM_LOGGER", "exnorm")
    )
    """The root name of the package logger.

    Set with the ``EXNORM_LOGGER`` environment variable.
    """

    seed: int = field(
        default_factory=lambda: int(os.getenv("EXNORM_SEED", "0"))
    )
    """Default seed for every command that takes ``--seed``.

    Set with the ``EXNORM_SEED`` environment variable.  Config files and
    flags both take precedence over it.
    """


def read_config_file(path: Path) -> Dict[str, str]:
    """Parse a plain ``key = value`` configuration file.

    Blank lines and lines starting with ``#`` are skipped.  Keys are
    normalized to the click parameter spelling, so ``weight-decay`` and
    ``weight_decay`` are the same key.
    """
    values: Dict[str, str] = {}
    for number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{number}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigFileError(f"{path}:{number}: empty key")
        values[key.replace("-", "_")] = value
    return values


def write_config_file(path: Path, values: Mapping[str, Any]) -> None:
    """Write resolved settings in the format `read_config_file` reads."""
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")
