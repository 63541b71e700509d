from __future__ import annotations

import hashlib
import os
from typing import Optional

try:
    from dotenv import load_dotenv  # type: ignore
    load_dotenv()  # load .env if present
except Exception:
    pass


ENV_PREFIX = "IGC_"
# nested RunConfig overrides: IGC__GROWTH__MAX_TREE_DEPTH=2
ENV_CONFIG_PREFIX = "IGC__"


class Settings:
    # Logging
    LOG_LEVEL: str = os.getenv("IGC_LOG_LEVEL", "INFO")
    LOG_JSON: bool = os.getenv("IGC_LOG_JSON", "0") == "1"
    LOG_FORMAT: str = os.getenv("IGC_LOG_FORMAT", "{time} | {level} | {name}:{function}:{line} - {message} | {extra}")

    # Runs
    OUT_DIR: Optional[str] = os.getenv("IGC_OUT_DIR")
    THREADS: Optional[int] = int(os.getenv("IGC_THREADS", "0") or 0) or None

    # Long synthetic benchmark in the test suite
    RUN_BENCHMARK: bool = os.getenv("IGC_RUN_BENCHMARK", "0") == "1"


settings = Settings()


def derive_seed(seed: int, name: str) -> int:
    """Stage sub-seed: first 8 bytes (little endian) of sha256("<seed>:<name>") mod 2**63."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 63)
