from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Dict, Optional

import orjson
import pandas as pd

from .logging import logger
from .schemas.config import RunConfig
from .schemas.manifest import ArtifactManifest


class StorageError(RuntimeError):
    pass


class MissingArtifactError(StorageError):
    def __init__(self, stage: str, path: Path, needed_by: Optional[str] = None) -> None:
        self.stage = stage
        self.path = Path(path)
        self.needed_by = needed_by
        who = f" (needed by {needed_by})" if needed_by else ""
        super().__init__(f"missing artifact of stage '{stage}': {self.path}{who}")


MANIFEST = "manifest.json"
RESOLVED_CONFIG = "resolved_config.json"

# knobs that must not change any artifact
_RUNTIME_ONLY = {"threads", "out_dir"}


def dumps(obj: Any) -> bytes:
    return orjson.dumps(obj, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)


def write_json(path: Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(obj))


def read_json(path: Path) -> Any:
    path = Path(path)
    try:
        return orjson.loads(path.read_bytes())
    except FileNotFoundError as exc:
        raise StorageError(f"file not found: {path}") from exc
    except orjson.JSONDecodeError as exc:
        raise StorageError(f"{path}: invalid JSON ({exc})") from exc


def write_csv(path: Path, df: pd.DataFrame) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)


def config_hash(config: RunConfig) -> str:
    # stable hash over the sorted config JSON, runtime-only knobs excluded
    payload = config.model_dump(mode="json", by_alias=True, exclude=_RUNTIME_ONLY)
    return hashlib.sha256(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)).hexdigest()


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_dir(out: Path, stage: str) -> Path:
    return Path(out) / stage


def write_resolved_config(out: Path, config: RunConfig) -> Path:
    path = Path(out) / RESOLVED_CONFIG
    write_json(path, config.model_dump(mode="json", by_alias=True))
    return path


def write_manifest(out: Path, manifest: ArtifactManifest) -> Path:
    path = stage_dir(out, manifest.stage) / MANIFEST
    write_json(path, manifest.model_dump())
    logger.bind(stage=manifest.stage).info(f"wrote {path} ({len(manifest.files)} files)")
    return path


def read_manifest(out: Path, stage: str, needed_by: Optional[str] = None) -> ArtifactManifest:
    path = stage_dir(out, stage) / MANIFEST
    if not path.exists():
        raise MissingArtifactError(stage, path, needed_by)
    return ArtifactManifest.model_validate(read_json(path))


def has_manifest(out: Path, stage: str) -> bool:
    return (stage_dir(out, stage) / MANIFEST).exists()


def dependency_hashes(out: Path, stages: Dict[str, Optional[str]]) -> Dict[str, str]:
    """stage -> sha256 of its manifest; every stage must be present."""
    hashes = {}
    for stage, needed_by in stages.items():
        path = stage_dir(out, stage) / MANIFEST
        if not path.exists():
            raise MissingArtifactError(stage, path, needed_by)
        hashes[stage] = file_sha256(path)
    return hashes
