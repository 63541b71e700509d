from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd

from .schemas.core import ExpertProfile


class MetricsError(RuntimeError):
    pass


def _paired(pred: Sequence[float], gt: Sequence[float]) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise MetricsError("metrics need at least one sample")
    if p.shape != g.shape:
        raise MetricsError(f"{p.size} predictions vs {g.size} ground-truth counts")
    return p - g


def mae(pred: Sequence[float], gt: Sequence[float]) -> float:
    return float(np.mean(np.abs(_paired(pred, gt))))


def mse(pred: Sequence[float], gt: Sequence[float]) -> float:
    """Root of the mean squared count error (the crowd-counting literature calls this MSE)."""
    d = _paired(pred, gt)
    return float(math.sqrt(np.mean(d * d)))


def specialty_profile(
    assignment: Sequence[str],
    gt_counts: Sequence[float],
    experts: Optional[Sequence[str]] = None,
) -> List[ExpertProfile]:
    """Mean / std of the GT counts each expert receives, plus its share.

    Experts listed in ``experts`` that receive nothing come back as NaN rows with
    ``empty=True``.
    """
    labels = list(assignment)
    counts = np.asarray(gt_counts, dtype=np.float64)
    if not labels:
        raise MetricsError("specialty profile needs a nonempty assignment")
    if len(labels) != counts.size:
        raise MetricsError(f"{len(labels)} assignments vs {counts.size} counts")
    names = sorted(set(labels) | set(experts or []))
    arr = np.asarray(labels, dtype=object)
    out = []
    for name in names:
        sel = counts[arr == name]
        if sel.size == 0:
            out.append(ExpertProfile(expert=name, n=0, mean=math.nan, std=math.nan, share=0.0, empty=True))
            continue
        out.append(
            ExpertProfile(
                expert=name,
                n=int(sel.size),
                mean=float(sel.mean()),
                std=float(sel.std()),
                share=sel.size / len(labels),
            )
        )
    return out


def profile_frame(profile: Sequence[ExpertProfile], **columns) -> pd.DataFrame:
    df = pd.DataFrame([p.model_dump() for p in profile], columns=list(ExpertProfile.model_fields))
    for i, (k, v) in enumerate(columns.items()):
        df.insert(i, k, v)
    return df


def pooled_separation(a: Sequence[float], b: Sequence[float]) -> float:
    """|mean(a) - mean(b)| over the pooled standard deviation."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise MetricsError(f"pooled separation needs >= 2 samples per group, got {x.size} and {y.size}")
    pooled = math.sqrt(((x.size - 1) * x.var(ddof=1) + (y.size - 1) * y.var(ddof=1)) / (x.size + y.size - 2))
    gap = abs(float(x.mean() - y.mean()))
    if pooled == 0:
        return math.inf if gap > 0 else 0.0
    return gap / pooled


def regime_purity(assignment: Sequence[str], regimes: Sequence[str]) -> pd.DataFrame:
    """Share of each held-out regime label inside every expert's specialty (analysis only)."""
    df = pd.DataFrame({"expert": list(assignment), "regime": list(regimes)})
    if df.empty:
        raise MetricsError("regime purity needs a nonempty assignment")
    table = df.groupby(["expert", "regime"]).size().rename("n").reset_index()
    table["share"] = table["n"] / table.groupby("expert")["n"].transform("sum")
    return table.sort_values(["expert", "regime"]).reset_index(drop=True)


@dataclass
class Stagnation:
    """Stops a loop once ``patience`` evaluations bring no relative gain above the threshold."""

    patience: int
    min_rel_improvement: float = 0.005
    mode: Literal["min", "max"] = "min"
    best: Optional[float] = None
    since_best: int = 0
    history: List[float] = field(default_factory=list)

    def _gains(self, value: float) -> bool:
        if self.best is None:
            return True
        if self.mode == "min":
            return value < self.best - self.min_rel_improvement * abs(self.best)
        return value > self.best + self.min_rel_improvement * abs(self.best)

    def update(self, value: float) -> bool:
        value = float(value)
        if not math.isfinite(value):
            raise MetricsError(f"non-finite monitored value {value} after {len(self.history)} evaluations")
        self.history.append(value)
        if self._gains(value):
            self.best = value
            self.since_best = 0
            return True
        self.since_best += 1
        return False

    @property
    def stalled(self) -> bool:
        return self.since_best >= self.patience


def level_table(rows: Sequence[Dict[str, float]]) -> pd.DataFrame:
    cols = ["level", "n_experts", "oracle_mae", "actual_mae", "classifier_accuracy", "min_leaf_share"]
    return pd.DataFrame(list(rows), columns=cols)
