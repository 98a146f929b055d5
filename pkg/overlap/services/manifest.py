"""
Overlap — Run Manifest.
Provenance record written as `manifest.json` by every command.

The manifest hash covers the command, tool version, seeds, configuration
contents and input file hashes, so it is known before any output is written
and can be stamped into reports. Output artifacts are listed with their
SHA-256 after the command finishes.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from overlap.core.config import settings

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

PathLike = Union[str, Path]


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str
    tool_version: str = settings.APP_VERSION
    seeds: Dict[str, int] = Field(default_factory=dict)
    config_paths: Dict[str, str] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    artifacts: Dict[str, str] = Field(default_factory=dict)
    manifest_hash: str = ""

    def add_inputs(self, paths: Iterable[PathLike]) -> None:
        for path in paths:
            self.inputs[Path(path).name] = file_sha256(path)

    def seal(self) -> str:
        """Fix the manifest hash over everything that determines the outputs."""
        provenance = self.model_dump(include={"command", "tool_version", "seeds", "config", "inputs"})
        canonical = json.dumps(provenance, sort_keys=True, separators=(",", ":"), default=str)
        self.manifest_hash = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
        return self.manifest_hash

    def write(self, out_dir: PathLike, artifacts: Optional[Iterable[PathLike]] = None) -> Path:
        out_dir = Path(out_dir)
        if not self.manifest_hash:
            self.seal()
        for path in artifacts or ():
            self.artifacts[Path(path).name] = file_sha256(path)
        target = out_dir / MANIFEST_NAME
        target.write_text(json.dumps(self.model_dump(), indent=2, sort_keys=True, default=str) + "\n")
        logger.info("%s: %d artifacts, manifest %s", self.command, len(self.artifacts), self.manifest_hash[:12])
        return target


def load_manifest(path: PathLike) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return RunManifest.model_validate_json(path.read_text())
