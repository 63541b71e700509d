from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import orjson

from ..logging import configure_logger, logger
from ..pipeline import ConfigError, load_config, parse_set, run_stage
from ..storage import MissingArtifactError

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FAILURE = 1


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=None, help="Run config (JSON, or YAML by extension)")
    p.add_argument("--out", default=None, help="Output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, default=None, help="Global seed")
    p.add_argument("--threads", type=int, default=None, help="Worker threads; never changes results")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Config override, e.g. growth.max_tree_depth=2")
    p.add_argument("--log-json", action="store_true", help="One JSON object per log record")
    p.add_argument("--log-level", default=None, help="Log level (default IGC_LOG_LEVEL)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="ig-crowd", description="Incrementally grown expert trees for crowd density regression")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_data = sub.add_parser("gen-data", parents=[common], help="Generate (or import) scenes and split them")
    p_data.add_argument("--from-folder", default=None, help="Import <id>.tge + <id>.csv pairs instead of generating")
    sub.add_parser("pretrain", parents=[common], help="Pretrain the base regressor")
    sub.add_parser("grow", parents=[common], help="Grow the expert tree from the pretrained regressor")
    p_clf = sub.add_parser("train-classifier", parents=[common], help="Retrain the expert classifier of one level")
    p_clf.add_argument("--level", type=int, default=None, help="Tree level (default: served level)")
    sub.add_parser("evaluate", parents=[common], help="Test-set level, method and specialty tables")
    p_base = sub.add_parser("baseline", parents=[common], help="Train a comparison system")
    p_base.add_argument("kind", choices=["moe", "nway"])
    p_base.add_argument("--k", type=int, default=None, help="Number of flat experts (nway)")
    sub.add_parser("analyze", parents=[common], help="Specialty, separation and regime-purity tables")
    return parser


def _stage(args: argparse.Namespace) -> Tuple[str, Dict[str, Any]]:
    if args.cmd == "gen-data":
        return "data", {"from_folder": args.from_folder}
    if args.cmd == "train-classifier":
        return "classifier", {"level": args.level}
    if args.cmd == "baseline":
        if args.kind == "moe":
            return "baseline-moe", {}
        if args.k is None or args.k < 2:
            raise ConfigError(f"baseline nway needs --k >= 2, got {args.k}", key="--k")
        return "baseline-nway", {"k": args.k}
    return args.cmd, {}


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out = parse_set(args.overrides)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    if args.out is not None:
        out["out_dir"] = args.out
    return out


def _report(exc: BaseException, stage: Optional[str], **fields: Any) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc), "stage": stage, **fields}
    sys.stderr.write(orjson.dumps(payload, default=str).decode("utf-8") + "\n")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logger(json_output=True if args.log_json else None, level=args.log_level)
    stage: Optional[str] = None
    try:
        stage, options = _stage(args)
        config = load_config(Path(args.config) if args.config else None, overrides=_overrides(args))
        manifest = run_stage(stage, config, options=options)
    except ConfigError as exc:
        _report(exc, stage, key=exc.key)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        _report(exc, stage, missing=exc.stage, path=str(exc.path))
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001
        logger.bind(stage=stage).exception("stage failed")
        _report(exc, stage)
        return EXIT_FAILURE
    print(f"{manifest.stage}: wrote {len(manifest.files)} files")
    return 0


if __name__ == "__main__":
    sys.exit(main())
