import math

import numpy as np
import pytest

from ig_crowd.metrics import (
    MetricsError,
    Stagnation,
    mae,
    mse,
    pooled_separation,
    profile_frame,
    regime_purity,
    specialty_profile,
)
from ig_crowd.schemas.core import LevelReport, MethodRow


def test_count_metrics_fixtures():
    assert mae([10, 20], [8, 25]) == pytest.approx(3.5, abs=1e-12)
    assert mse([10, 20], [8, 25]) == pytest.approx(math.sqrt(14.5), abs=1e-12)
    assert round(mse([10, 20], [8, 25]), 4) == 3.8079
    assert mae([3, 4], [3, 4]) == 0.0 and mse([3, 4], [3, 4]) == 0.0
    assert mae([20, 10], [25, 8]) == mae([10, 20], [8, 25])


def test_mse_dominates_mae():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, g = rng.uniform(0, 50, 7), rng.uniform(0, 50, 7)
        assert mse(p, g) >= mae(p, g)


def test_count_metrics_reject_bad_input():
    with pytest.raises(MetricsError):
        mae([], [])
    with pytest.raises(MetricsError):
        mse([1.0, 2.0], [1.0])


def test_specialty_profile_example():
    profile = specialty_profile(["e0", "e0", "e1"], [1.0, 3.0, 10.0])
    by_name = {p.expert: p for p in profile}
    assert by_name["e0"].mean == 2.0 and by_name["e1"].mean == 10.0
    assert by_name["e0"].share == pytest.approx(2 / 3)
    assert by_name["e1"].share == pytest.approx(1 / 3)
    assert by_name["e0"].std == 1.0


def test_specialty_profile_flags_empty_expert():
    profile = specialty_profile(["a", "a"], [1.0, 5.0], experts=["a", "b"])
    empty = profile[1]
    assert empty.expert == "b" and empty.empty
    assert math.isnan(empty.mean) and math.isnan(empty.std) and empty.share == 0.0
    frame = profile_frame(profile, level=1)
    assert list(frame.columns[:2]) == ["level", "expert"]
    with pytest.raises(MetricsError):
        specialty_profile([], [])


def test_pooled_separation():
    assert pooled_separation([1.0, 3.0], [11.0, 13.0]) == pytest.approx(10.0 / math.sqrt(2.0))
    assert pooled_separation([2.0, 2.0], [2.0, 2.0]) == 0.0
    assert pooled_separation([1.0, 1.0], [2.0, 2.0]) == math.inf
    with pytest.raises(MetricsError):
        pooled_separation([1.0], [2.0, 3.0])


def test_regime_purity():
    table = regime_purity(["0", "0", "0", "1"], ["dense", "dense", "sparse", "sparse"])
    row = table[(table.expert == "0") & (table.regime == "dense")].iloc[0]
    assert row["n"] == 2 and row["share"] == pytest.approx(2 / 3)
    assert table[table.expert == "1"]["share"].tolist() == [1.0]


def test_stagnation():
    stop = Stagnation(patience=2, min_rel_improvement=0.1)
    assert stop.update(10.0)
    assert not stop.update(9.5)
    assert not stop.stalled
    assert not stop.update(9.2)
    assert stop.stalled
    grow = Stagnation(patience=1, mode="max")
    grow.update(50.0)
    assert grow.update(80.0)
    with pytest.raises(MetricsError):
        grow.update(float("nan"))


def test_reports_reject_oracle_above_actual():
    with pytest.raises(ValueError, match="exceeds"):
        LevelReport(level=1, n_experts=2, oracle_mae=2.0, actual_mae=1.0, classifier_accuracy=50.0)
    with pytest.raises(ValueError):
        LevelReport(level=1, n_experts=2, oracle_mae=1.0, actual_mae=1.0, classifier_accuracy=50.0, shares={"0": 0.5, "1": 0.4})
    with pytest.raises(ValueError, match="below MAE"):
        MethodRow(method="x", n_experts=1, actual_mae=1.0, image_mae=3.0, image_mse=2.0)
    row = MethodRow(method="moe", n_experts=4, actual_mae=1.0, image_mae=1.0, image_mse=1.5)
    assert row.oracle_mae is None


def test_method_row_tolerates_rounding_on_large_counts():
    # one ulp below at 1e6 is ~1e-10, far above an absolute 1e-12
    mae_value = 1e6
    row = MethodRow(method="big", n_experts=2, actual_mae=1.0, image_mae=mae_value, image_mse=float(np.nextafter(mae_value, 0.0)))
    assert row.image_mse < row.image_mae
    with pytest.raises(ValueError, match="below MAE"):
        MethodRow(method="big", n_experts=2, actual_mae=1.0, image_mae=mae_value, image_mse=mae_value * (1 - 1e-9))


def test_image_mse_is_documented_as_rmse():
    assert "root-mean-square" in MethodRow.model_fields["image_mse"].description
    row = MethodRow(method="m", n_experts=1, actual_mae=1.0, image_mae=mae([10, 20], [8, 25]), image_mse=mse([10, 20], [8, 25]))
    assert row.image_mse == pytest.approx(math.sqrt(14.5))
