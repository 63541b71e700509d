from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class ArtifactManifest(BaseModel):
    schema_version: str = Field(default="1.0.0")
    stage: str
    method: Optional[str] = None
    seed: int
    config_hash: str
    # stage name -> sha256 of that stage's manifest.json
    dependencies: Dict[str, str] = Field(default_factory=dict)
    files: List[str] = Field(default_factory=list)
    extra: Dict[str, Any] = Field(default_factory=dict)


class CheckpointManifest(BaseModel):
    schema_version: str = Field(default="1.0.0")
    architecture: str
    seed: int
    step: int = 0
    val_mae: Optional[float] = None
    params: List[str] = Field(default_factory=list)
    # classifier checkpoints only: class index -> leaf address
    classes: List[str] = Field(default_factory=list)
    extra: Dict[str, Any] = Field(default_factory=dict)
