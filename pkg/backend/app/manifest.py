from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any
from uuid import uuid4

from pydantic import BaseModel, ConfigDict, Field


TOOL_NAME = "bdpo-lab"
TOOL_VERSION = "0.1.0"
MANIFEST_FILE = "manifest.json"


class InputFileDTO(BaseModel):
    model_config = ConfigDict(extra="forbid")

    role: str
    path: str
    sha256: str


class RunManifestDTO(BaseModel):
    """Everything needed to rerun a subcommand: its argv, inputs (hashed), config and outputs."""

    model_config = ConfigDict(extra="forbid")

    run_id: str = Field(default_factory=lambda: str(uuid4()))
    tool: str = TOOL_NAME
    tool_version: str = TOOL_VERSION
    command: str
    argv: list[str]
    seed: int | None = None
    inputs: list[InputFileDTO] = Field(default_factory=list)
    config: dict[str, Any] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    timings: dict[str, float] = Field(default_factory=dict)
    dataset_fingerprint: str | None = None


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def input_file(role: str, path: Path) -> InputFileDTO:
    return InputFileDTO(role=role, path=str(path), sha256=sha256_file(path))


def write_manifest(out_dir: Path, manifest: RunManifestDTO) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_FILE
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
