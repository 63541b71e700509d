from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .baselines import MoEModel, moe_roi_maps
from .classifier import Router, labels_from_errors
from .density import PatchBank, SceneLike, grid_patches, stitch_predictions
from .logging import logger
from .metrics import MetricsError, mae, mse, profile_frame, specialty_profile
from .regressor import RegressorNet, map_counts, roi_maps
from .schemas.core import MethodRow, PatchSpec
from .tree import ExpertTree, node_dirname, oracle_from_errors


class EvaluationError(RuntimeError):
    pass


# image_mse holds the RMSE form: sqrt(mean((count - gt)^2)), in heads
LEVEL_COLUMNS = [
    "level",
    "n_experts",
    "oracle_mae",
    "actual_mae",
    "classifier_accuracy",
    "min_leaf_share",
    "image_mae",
    "image_mse",
    "image_oracle_mae",
]
IMAGE_COLUMNS = ["method", "scene_id", "regime", "gt_count", "count", "oracle_count"]


def scene_count(scene: SceneLike) -> float:
    """Ground-truth count of a scene: the mass of its density map."""
    return float(np.asarray(scene.density, dtype=np.float64).sum())


def _stitch(maps: np.ndarray, bank: PatchBank, shape) -> float:
    h, w = shape
    placed = [(maps[i], (int(t) // 4, int(l) // 4)) for i, (t, l) in enumerate(bank.placements)]
    return stitch_predictions(placed, (h // 4, w // 4)).count


@dataclass
class ExpertEvaluation:
    """Routed and oracle results of one expert set over test scenes.

    Patch-level numbers cover every slid RoI of every scene; image-level numbers come
    from the stitched full-image counts.
    """

    addresses: List[str]
    bank: PatchBank
    errors: np.ndarray  # (P, K) count errors, columns in ``addresses`` order
    labels: List[str]  # oracle label per patch
    chosen: List[str]  # routed expert per patch
    images: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=IMAGE_COLUMNS))

    @property
    def oracle_mae(self) -> float:
        return oracle_from_errors(self.errors)

    @property
    def actual_mae(self) -> float:
        col = {a: i for i, a in enumerate(self.addresses)}
        return float(self.errors[np.arange(len(self.chosen)), [col[c] for c in self.chosen]].mean())

    @property
    def accuracy(self) -> float:
        return float(100.0 * np.mean(np.asarray(self.chosen, dtype=object) == np.asarray(self.labels, dtype=object)))

    @property
    def image_mae(self) -> float:
        return mae(self.images["count"], self.images["gt_count"])

    @property
    def image_mse(self) -> float:
        return mse(self.images["count"], self.images["gt_count"])

    @property
    def image_oracle_mae(self) -> float:
        return mae(self.images["oracle_count"], self.images["gt_count"])


def evaluate_experts(
    experts: Mapping[str, RegressorNet],
    router: Router,
    scenes: Sequence[SceneLike],
    spec: PatchSpec,
    threads: Optional[int] = None,
    method: str = "",
) -> ExpertEvaluation:
    """Slide the RoI over every scene, route each RoI, and stitch both the routed and the oracle maps."""
    if not scenes:
        raise EvaluationError("evaluation needs at least one test scene")
    addresses = sorted(experts)
    if not addresses:
        raise EvaluationError("evaluation needs at least one expert")
    banks, errors, labels, chosen, rows = [], [], [], [], []
    for scene in scenes:
        bank = grid_patches(scene, spec)
        maps = np.stack([roi_maps(experts[a], bank, threads) for a in addresses])  # (K, P, gh, gw)
        errs = np.abs(np.stack([map_counts(m) for m in maps], axis=1) - bank.counts[:, None])
        oracle = labels_from_errors(errs, addresses)
        routed = router.route(bank, experts, threads)
        unknown = sorted(set(routed) - set(addresses))
        if unknown:
            raise EvaluationError(f"router picked unknown experts {unknown}")
        col = {a: i for i, a in enumerate(addresses)}
        rows_idx = np.arange(len(bank))
        routed_maps = maps[[col[c] for c in routed], rows_idx]
        oracle_maps = maps[[col[c] for c in oracle], rows_idx]
        rows.append(
            {
                "method": method,
                "scene_id": scene.scene_id,
                "regime": scene.regime_label,
                "gt_count": scene_count(scene),
                "count": _stitch(routed_maps, bank, scene.image.shape),
                "oracle_count": _stitch(oracle_maps, bank, scene.image.shape),
            }
        )
        banks.append(bank)
        errors.append(errs)
        labels += oracle
        chosen += routed
    return ExpertEvaluation(
        addresses=addresses,
        bank=concat_banks(banks, spec),
        errors=np.concatenate(errors),
        labels=labels,
        chosen=chosen,
        images=pd.DataFrame(rows, columns=IMAGE_COLUMNS),
    )


def concat_banks(banks: Sequence[PatchBank], spec: PatchSpec) -> PatchBank:
    if not banks:
        return PatchBank.empty(spec)
    return PatchBank(
        spec=spec,
        images=np.concatenate([b.images for b in banks]),
        gts=np.concatenate([b.gts for b in banks]),
        counts=np.concatenate([b.counts for b in banks]),
        ids=[i for b in banks for i in b.ids],
        scene_ids=[i for b in banks for i in b.scene_ids],
        regimes=[r for b in banks for r in b.regimes],
        placements=np.concatenate([b.placements for b in banks]),
    )


def evaluate_levels(
    tree: ExpertTree, scenes: Sequence[SceneLike], spec: PatchSpec, threads: Optional[int] = None
) -> Dict[int, ExpertEvaluation]:
    out = {}
    for state in tree.levels:
        ev = evaluate_experts(tree.experts(state.level), state.router(), scenes, spec, threads, method=f"level-{state.level}")
        logger.bind(stage="evaluate", level=state.level).info(
            f"test oracle_mae={ev.oracle_mae:.6g} actual_mae={ev.actual_mae:.6g} image_mae={ev.image_mae:.6g}"
        )
        out[state.level] = ev
    return out


def level_rows(tree: ExpertTree, evaluations: Mapping[int, ExpertEvaluation]) -> pd.DataFrame:
    """Test-set table with one row per grown level; ``image_mse`` is the RMSE of full-image counts."""
    rows = []
    for state in tree.levels:
        ev = evaluations[state.level]
        rows.append(
            {
                "level": state.level,
                "n_experts": len(state.leaves),
                "oracle_mae": ev.oracle_mae,
                "actual_mae": ev.actual_mae,
                "classifier_accuracy": ev.accuracy,
                "min_leaf_share": state.report.min_leaf_share,
                "image_mae": ev.image_mae,
                "image_mse": ev.image_mse,
                "image_oracle_mae": ev.image_oracle_mae,
            }
        )
    return pd.DataFrame(rows, columns=LEVEL_COLUMNS)


def expert_row(name: str, ev: ExpertEvaluation, note: Optional[str] = None) -> MethodRow:
    return MethodRow(
        method=name,
        n_experts=len(ev.addresses),
        oracle_mae=ev.oracle_mae,
        actual_mae=ev.actual_mae,
        image_mae=ev.image_mae,
        image_mse=ev.image_mse,
        note=note,
    )


@dataclass
class MoEEvaluation:
    patch_errors: np.ndarray
    images: pd.DataFrame

    def row(self, n_experts: int, note: Optional[str] = None) -> MethodRow:
        return MethodRow(
            method="moe",
            n_experts=n_experts,
            oracle_mae=None,
            actual_mae=float(self.patch_errors.mean()),
            image_mae=mae(self.images["count"], self.images["gt_count"]),
            image_mse=mse(self.images["count"], self.images["gt_count"]),
            note=note,
        )


def evaluate_moe(model: MoEModel, scenes: Sequence[SceneLike], spec: PatchSpec, threads: Optional[int] = None) -> MoEEvaluation:
    if not scenes:
        raise EvaluationError("evaluation needs at least one test scene")
    errors, rows = [], []
    for scene in scenes:
        bank = grid_patches(scene, spec)
        maps = moe_roi_maps(model, bank, threads)
        errors.append(np.abs(map_counts(maps) - bank.counts))
        count = _stitch(maps, bank, scene.image.shape)
        rows.append(
            {
                "method": "moe",
                "scene_id": scene.scene_id,
                "regime": scene.regime_label,
                "gt_count": scene_count(scene),
                "count": count,
                # a soft mixture has no oracle
                "oracle_count": np.nan,
            }
        )
    return MoEEvaluation(np.concatenate(errors), pd.DataFrame(rows, columns=IMAGE_COLUMNS))


def specialty_frames(ev: ExpertEvaluation, **columns) -> pd.DataFrame:
    """Per-expert count distribution of the test patches, by oracle label and by routing."""
    names = [node_dirname(a) for a in ev.addresses]
    frames = []
    for mode, assignment in (("oracle", ev.labels), ("classifier", ev.chosen)):
        try:
            profile = specialty_profile([node_dirname(a) for a in assignment], ev.bank.counts, names)
        except MetricsError as exc:
            raise EvaluationError(f"specialty profile ({mode}): {exc}") from exc
        frames.append(profile_frame(profile, mode=mode, **columns))
    return pd.concat(frames, ignore_index=True)


def image_table(evaluations: Mapping[str, pd.DataFrame]) -> pd.DataFrame:
    frames: Dict[str, pd.DataFrame] = {k: v for k, v in evaluations.items() if v is not None and not v.empty}
    if not frames:
        return pd.DataFrame(columns=IMAGE_COLUMNS)
    return pd.concat([frames[k] for k in frames], ignore_index=True)
