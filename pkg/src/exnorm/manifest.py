"""Run manifests written next to every command's outputs."""

from __future__ import annotations

__all__ = ["MANIFEST_NAME", "RunManifest"]

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict

import structlog
from jsonschema import validate

from exnorm import __version__
from exnorm.types import ExportError

MANIFEST_NAME = "manifest.json"

logger = structlog.get_logger(__name__)


@dataclass
class RunManifest:
    """What ran, with which settings, and what it wrote."""

    command: str
    config: Dict[str, Any]
    """Every setting of the command, defaults included."""

    seed: int
    artifacts: Dict[str, str] = field(default_factory=dict)
    """Output files by role, relative to the output directory."""

    version: str = __version__

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        validate(
            instance=data,
            schema=json.loads(
                resources.read_text("exnorm.schemas", "manifest.json")
            ),
        )
        return data

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_NAME
        self.artifacts.setdefault("manifest", MANIFEST_NAME)
        body = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        try:
            path.write_text(body + "\n")
        except OSError as e:
            raise ExportError(f"Cannot write {path}: {e}") from e
        logger.info("Wrote manifest", path=str(path), command=self.command)
        return path

    @classmethod
    def read(cls, path: Path) -> RunManifest:
        return cls(**json.loads(path.read_text()))
