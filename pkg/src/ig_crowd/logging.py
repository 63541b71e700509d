from __future__ import annotations

import sys
from typing import Optional

from loguru import logger

from .config import settings


def _default_level() -> str:
    return settings.LOG_LEVEL


def _default_format() -> str:
    # structured-ish line; IGC_LOG_JSON=1 switches to one JSON object per record
    return settings.LOG_FORMAT


def configure_logger(json_output: Optional[bool] = None, level: Optional[str] = None) -> None:
    logger.remove()
    level = level or _default_level()
    fmt = _default_format()
    json_enabled = json_output if json_output is not None else settings.LOG_JSON
    if json_enabled:
        def serialize(record):
            import orjson
            payload = {
                "time": record["time"].isoformat(),
                "level": record["level"].name,
                "message": record["message"],
                "name": record["name"],
                "function": record["function"],
                "line": record["line"],
                "extra": record.get("extra", {}),
            }
            # loguru treats the returned string as a format template
            line = orjson.dumps(payload, default=str).decode("utf-8")
            return line.replace("{", "{{").replace("}", "}}") + "\n"
        logger.add(sys.stdout, level=level, format=serialize, backtrace=False, diagnose=False)
    else:
        logger.add(sys.stdout, level=level, format=fmt, backtrace=False, diagnose=False)


# initialize on import for library default
try:
    configure_logger()
except Exception:
    pass

__all__ = ["logger", "configure_logger"]
