from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import orjson
import pandas as pd

from .classifier import ClassifierNet, ClassifierResult, ClassifierRouter, ConstantRouter, Router, load_classifier, save_classifier
from .config import derive_seed
from .density import DensityMap, PatchBank
from .logging import logger
from .metrics import Stagnation
from .parallel import chunk_ranges, ordered_map
from .regressor import PatchSource, RegressorNet, l2_loss, load_regressor, map_counts, predict_rois, save_regressor
from .schemas.core import ClassifierConfig, GrowthConfig, MethodRow, MoEConfig, PatchSpec
from .schemas.manifest import CheckpointManifest
from .tensor import ParamSet, Tensor, as_tensor, backward, no_grad, sgd_step
from .tree import DifferentialResult, LevelFit, fit_level, replicate, split_rng, train_experts


class BaselineError(RuntimeError):
    pass


MOE_TRAINING = "joint-end-to-end"


@dataclass
class MoEModel:
    """K regressors mixed by a softmax gate looking at the RoI."""

    experts: List[RegressorNet]
    gate: ClassifierNet

    def __post_init__(self) -> None:
        if len(self.experts) < 2:
            raise BaselineError(f"a mixture needs K >= 2 experts, got {len(self.experts)}")
        if self.gate.n_classes != len(self.experts):
            raise BaselineError(f"gate has {self.gate.n_classes} outputs for {len(self.experts)} experts")

    @classmethod
    def from_base(cls, base: RegressorNet, k: int, gate_cfg: ClassifierConfig, rng: np.random.Generator) -> "MoEModel":
        return cls(experts=replicate(base, k), gate=ClassifierNet.init(gate_cfg, k, rng))

    def parameter_sets(self) -> List[ParamSet]:
        return [e.params for e in self.experts] + [self.gate.params]


def moe_forward(model: MoEModel, images: np.ndarray, spec: PatchSpec) -> Tensor:
    """sum_k gate_k(RoI) * M_k(patch), shape (N, 1, roi_h/4, roi_w/4)."""
    x = as_tensor(images)
    mt, ml = spec.margin
    gate = model.gate.probabilities(as_tensor(np.ascontiguousarray(images[:, :, mt:mt + spec.roi_h, ml:ml + spec.roi_w])))
    n = x.shape[0]
    mixture = None
    for k, expert in enumerate(model.experts):
        term = gate[:, k].reshape(n, 1, 1, 1) * predict_rois(expert, x, spec)
        mixture = term if mixture is None else mixture + term
    return mixture


def moe_predict(model: MoEModel, patch: np.ndarray, spec: PatchSpec) -> DensityMap:
    with no_grad():
        out = moe_forward(model, np.asarray(patch, dtype=np.float64)[None, None], spec)
    return DensityMap(out.data[0, 0])


def moe_roi_maps(model: MoEModel, bank: PatchBank, threads: Optional[int] = None) -> np.ndarray:
    gh, gw = bank.spec.roi_map_shape
    if len(bank) == 0:
        return np.zeros((0, gh, gw))

    def run(rows: range) -> np.ndarray:
        with no_grad():
            return moe_forward(model, bank.images[rows.start:rows.stop], bank.spec).data[:, 0]

    return np.concatenate(ordered_map(run, chunk_ranges(len(bank)), threads))


def moe_counts(model: MoEModel, bank: PatchBank, threads: Optional[int] = None) -> np.ndarray:
    return map_counts(moe_roi_maps(model, bank, threads))


@dataclass
class MoEResult:
    model: MoEModel
    curve: pd.DataFrame
    best_val_mae: float


def train_moe(
    model: MoEModel,
    train: PatchSource,
    val: PatchBank,
    cfg: MoEConfig,
    rng: np.random.Generator,
    threads: Optional[int] = None,
) -> MoEResult:
    """Gate and experts trained jointly on the density l2 loss of the mixture."""
    log = logger.bind(stage="baseline", method="moe")
    if len(val) == 0:
        raise BaselineError("mixture training needs a nonempty validation set")
    stagnation = Stagnation(cfg.patience, cfg.min_rel_improvement)
    val_mae = float(np.mean(np.abs(moe_counts(model, val, threads) - val.counts)))
    stagnation.update(val_mae)
    best = _snapshot(model)
    best_mae = val_mae
    rows = [{"epoch": 0, "train_l2": math.nan, "val_mae": val_mae}]
    step, last_finite = 0, math.nan
    for epoch in range(1, cfg.max_epochs + 1):
        batch = train.draw(rng)
        order = rng.permutation(len(batch))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = l2_loss(moe_forward(model, batch.images[idx], batch.spec), batch.gts[idx])
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise BaselineError(f"mixture training diverged at step {step} (last finite loss {last_finite})")
            last_finite = value
            backward(loss)
            for params in model.parameter_sets():
                sgd_step(params, cfg.optim)
            losses.append(value)
        val_mae = float(np.mean(np.abs(moe_counts(model, val, threads) - val.counts)))
        rows.append({"epoch": epoch, "train_l2": float(np.mean(losses)) if losses else math.nan, "val_mae": val_mae})
        log.bind(epoch=epoch).info(f"val_mae={val_mae:.6g}")
        if val_mae < best_mae:
            best, best_mae = _snapshot(model), val_mae
        stagnation.update(val_mae)
        if stagnation.stalled:
            break
    return MoEResult(model=best, curve=pd.DataFrame(rows, columns=["epoch", "train_l2", "val_mae"]), best_val_mae=best_mae)


def _snapshot(model: MoEModel) -> MoEModel:
    gate = ClassifierNet(model.gate.params.copy(reset_velocity=True), model.gate.config, model.gate.n_classes)
    return MoEModel(experts=[e.copy() for e in model.experts], gate=gate)


def save_moe(model: MoEModel, directory: Path, *, seed: int) -> List[str]:
    directory = Path(directory)
    files: List[str] = []
    for k, expert in enumerate(model.experts):
        files += [f"experts/{k}/{f}" for f in save_regressor(expert, directory / "experts" / str(k), seed=seed, method="moe")]
    files += [f"gate/params/{f}" for f in model.gate.params.save(directory / "gate" / "params")]
    manifest = CheckpointManifest(
        architecture=model.gate.architecture,
        seed=seed,
        params=model.gate.params.names(),
        classes=[str(k) for k in range(len(model.experts))],
        extra={"config": model.gate.config.model_dump(mode="json"), "training": MOE_TRAINING},
    )
    (directory / "gate" / "manifest.json").write_bytes(orjson.dumps(manifest.model_dump(), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return files + ["gate/manifest.json"]


def load_moe(directory: Path) -> MoEModel:
    directory = Path(directory)
    path = directory / "gate" / "manifest.json"
    if not path.exists():
        raise BaselineError(f"mixture checkpoint not found: {path}")
    manifest = CheckpointManifest.model_validate(orjson.loads(path.read_bytes()))
    gate = ClassifierNet(
        ParamSet.load(directory / "gate" / "params", manifest.params),
        ClassifierConfig.model_validate(manifest.extra["config"]),
        len(manifest.classes),
    )
    experts = [load_regressor(directory / "experts" / str(k)) for k in range(len(manifest.classes))]
    return MoEModel(experts=experts, gate=gate)


def expert_names(k: int) -> List[str]:
    """Flat expert addresses that sort in index order."""
    width = len(str(k - 1))
    return [str(i).zfill(width) for i in range(k)]


def nway_differential_train(
    base: RegressorNet,
    k: int,
    train: PatchBank,
    val: PatchBank,
    cfg: GrowthConfig,
    seed: int,
    threads: Optional[int] = None,
) -> DifferentialResult:
    """K copies of ``base`` specialised jointly on the full set, no hierarchy.

    Shares the split RNG of the tree's root split, so K=2 reproduces level 1 of the
    tree bit for bit.
    """
    if k < 2:
        raise BaselineError(f"N-way differential training needs K >= 2, got {k}")
    rng = split_rng(derive_seed(seed, "differential"), "")
    return train_experts(replicate(base, k), train, val, cfg, rng, threads, label="")


@dataclass
class NWayModel:
    """Flat experts plus whatever routes between them."""

    experts: Dict[str, RegressorNet]
    classifier: Optional[ClassifierResult] = None
    constant: Optional[str] = None

    def router(self) -> Router:
        if self.classifier is not None:
            return ClassifierRouter(self.classifier.net, self.classifier.classes)
        return ConstantRouter(self.constant if self.constant is not None else sorted(self.experts)[0])


def fit_nway(
    result: DifferentialResult,
    train: PatchBank,
    val: PatchBank,
    cfg: ClassifierConfig,
    rng: np.random.Generator,
    threads: Optional[int] = None,
) -> Tuple[NWayModel, LevelFit]:
    experts = dict(zip(expert_names(len(result.experts)), result.experts))
    fit = fit_level(experts, train, val, cfg, rng, threads)
    return NWayModel(experts, fit.classifier, fit.constant), fit


def save_nway(model: NWayModel, directory: Path, *, seed: int) -> List[str]:
    directory = Path(directory)
    files: List[str] = []
    for name, net in sorted(model.experts.items()):
        files += [f"experts/{name}/{f}" for f in save_regressor(net, directory / "experts" / name, seed=seed, method="nway")]
    if model.classifier is not None:
        files += [f"classifier/{f}" for f in save_classifier(model.classifier, directory / "classifier", seed=seed)]
    meta = {"experts": sorted(model.experts), "constant": model.constant}
    (directory / "router.json").write_bytes(orjson.dumps(meta, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return files + ["router.json"]


def load_nway(directory: Path) -> NWayModel:
    directory = Path(directory)
    path = directory / "router.json"
    if not path.exists():
        raise BaselineError(f"N-way checkpoint not found: {path}")
    meta = orjson.loads(path.read_bytes())
    experts = {name: load_regressor(directory / "experts" / name) for name in meta["experts"]}
    classifier = load_classifier(directory / "classifier") if (directory / "classifier" / "manifest.json").exists() else None
    return NWayModel(experts, classifier, meta.get("constant"))


# image_mse holds the RMSE form, comparable in units to image_mae
TABLE_COLUMNS = ["method", "n_experts", "oracle_mae", "actual_mae", "image_mae", "image_mse", "note"]


def compare_table(methods: Mapping[str, Optional[MethodRow]]) -> pd.DataFrame:
    """Comparison table; methods without a result are logged and left out.

    ``image_mse`` is the root-mean-square error of full-image counts, not the squared error.
    """
    rows = []
    for name, row in methods.items():
        if row is None:
            logger.bind(stage="evaluate", method=name).warning(f"no checkpoint for {name}; row omitted")
            continue
        rows.append(row.model_dump())
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)

