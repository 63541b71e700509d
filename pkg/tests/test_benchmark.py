from pathlib import Path

import orjson
import pandas as pd
import pytest

from ig_crowd.config import settings
from ig_crowd.pipeline import load_config, run_stage

BENCHMARK = Path(__file__).resolve().parents[1] / "configs" / "benchmark.json"

pytestmark = pytest.mark.skipif(not settings.RUN_BENCHMARK, reason="set IGC_RUN_BENCHMARK=1 for the synthetic benchmark")


def test_specialization_emerges(tmp_path):
    cfg = load_config(BENCHMARK, environ={})
    for stage in ("data", "pretrain", "grow", "analyze"):
        run_stage(stage, cfg, tmp_path)

    reports = orjson.loads((tmp_path / "grow" / "reports.json").read_bytes())
    assert [r["level"] for r in reports] == [0, 1, 2]
    train_oracle = [r["train_oracle_mae"] for r in reports]
    for parent, child in zip(train_oracle, train_oracle[1:]):
        assert child <= 0.9 * parent

    assert reports[1]["classifier_accuracy"] >= 80.0

    separation = pd.read_csv(tmp_path / "analyze" / "separation.csv")
    routed = separation[(separation["level"] == 1) & (separation["mode"] == "classifier")]
    assert len(routed) == 1
    assert float(routed["separation"].iloc[0]) >= 2.0
