from __future__ import annotations

import os
import shutil
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import orjson
import yaml
from pydantic import ValidationError

from .config import ENV_CONFIG_PREFIX, settings
from .logging import logger
from .parallel import resolve_threads
from .registry import REGISTRY, StageContext, StageSpec
from .schemas.config import RunConfig
from .schemas.manifest import ArtifactManifest
from .storage import config_hash, dependency_hashes, file_sha256, has_manifest, stage_dir, write_manifest, write_resolved_config


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None) -> None:
        self.key = key
        super().__init__(message)


class PipelineError(RuntimeError):
    pass


# ---------- configuration ----------


def _read_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", key="--config")
    raw = path.read_bytes()
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(raw) or {}
        else:
            data = orjson.loads(raw)
    except (yaml.YAMLError, orjson.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})", key="--config") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping, got {type(data).__name__}", key="--config")
    return data


def _assign(data: Dict[str, Any], keys: List[str], value: Any, source: str) -> None:
    node = data
    for i, key in enumerate(keys[:-1]):
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{source}: {'.'.join(keys[:i + 1])} is not a section", key=".".join(keys))
        node = child
    node[keys[-1]] = value


def _parse_value(text: str) -> Any:
    # YAML scalars: 2 -> int, [64, 64] -> list, true -> bool; pydantic coerces "1e-5"
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """IGC__GROWTH__MAX_TREE_DEPTH=2 -> {"growth.max_tree_depth": 2}"""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_CONFIG_PREFIX):
            continue
        key = ".".join(part.lower() for part in name[len(ENV_CONFIG_PREFIX):].split("__"))
        out[key] = _parse_value(value)
    return out


def parse_set(items: Optional[List[str]]) -> Dict[str, Any]:
    """``key.path=value`` pairs from the command line."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key.path=value", key=item)
        out[key.strip()] = _parse_value(value)
    return out


def _validation_key(exc: ValidationError) -> str:
    err = exc.errors()[0]
    return ".".join(str(p) for p in err.get("loc", ())) or "<root>"


def load_config(
    path: Optional[Path] = None,
    *,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Defaults < config file < IGC__ environment < ``overrides`` (dotted keys)."""
    data: Dict[str, Any] = _read_config_file(path) if path else {}
    for source, layer in (("environment", env_overrides(environ)), ("command line", dict(overrides or {}))):
        for key, value in layer.items():
            _assign(data, key.split("."), value, source)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        key = _validation_key(exc)
        raise ConfigError(f"invalid config key {key}: {exc.errors()[0]['msg']}", key=key) from exc


def resolve_out(config: RunConfig, out: Optional[Path] = None) -> Path:
    target = out or config.out_dir or settings.OUT_DIR
    if not target:
        raise ConfigError("no output directory: pass --out, set out_dir or IGC_OUT_DIR", key="out_dir")
    return Path(target)


# ---------- stages ----------


def resolve_stage(stage: str) -> StageSpec:
    if stage not in REGISTRY:
        raise PipelineError(f"unknown stage {stage!r}; known: {', '.join(sorted(REGISTRY))}")
    return REGISTRY[stage]


def run_stage(
    stage: str,
    config: RunConfig,
    out: Optional[Path] = None,
    *,
    options: Optional[Dict[str, Any]] = None,
) -> ArtifactManifest:
    """Run one stage into ``<out>/<artifact>/`` and write its manifest.

    Predecessor manifests must exist; their hashes are recorded so the artifact can be
    traced back. The stage directory is cleared first so re-runs are byte identical.
    """
    spec = resolve_stage(stage)
    opts = dict(options or {})
    name = spec.artifact(opts)
    root = resolve_out(config, out)
    log = logger.bind(stage=name)
    deps = dependency_hashes(root, {s: name for s in spec.requires})
    for s in spec.optional(config) if spec.optional else []:
        if has_manifest(root, s):
            deps[s] = file_sha256(stage_dir(root, s) / "manifest.json")
    target = stage_dir(root, name)
    if target.exists():
        shutil.rmtree(target)
    target.mkdir(parents=True)
    write_resolved_config(root, config)
    ctx = StageContext(config=config, out=root, stage=name, threads=resolve_threads(config.threads), options=opts)
    log.info(f"running {name} (seed {config.seed}, {ctx.threads} thread(s))")
    output = spec.run(ctx)
    manifest = ArtifactManifest(
        stage=name,
        method=output.method or spec.method,
        seed=config.seed,
        config_hash=config_hash(config),
        dependencies=deps,
        files=sorted(output.files),
        extra=output.extra,
    )
    write_manifest(root, manifest)
    return manifest
