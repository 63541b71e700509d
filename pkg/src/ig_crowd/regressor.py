from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Union

import numpy as np
import orjson
import pandas as pd

from .density import DensityMap, PatchBank, flip_augment
from .logging import logger
from .metrics import Stagnation
from .parallel import chunk_ranges, ordered_map
from .schemas.core import LossConfig, PatchSpec, PretrainConfig, RegressorConfig
from .schemas.manifest import CheckpointManifest
from .tensor import ParamSet, ShapeError, Tensor, as_tensor, backward, conv2d, maxpool2, no_grad, relu, sgd_step, uniform_fan_in


class RegressorError(RuntimeError):
    pass


# pools happen after the first two convolutions
_POOL_AFTER = (0, 1)


@dataclass
class RegressorNet:
    """Five convolutions with two 2x2 pools: the density map comes out at 1/4 scale."""

    params: ParamSet
    config: RegressorConfig

    @classmethod
    def init(cls, config: RegressorConfig, rng: np.random.Generator) -> "RegressorNet":
        params = ParamSet()
        c_in = 1
        last = len(config.widths) - 1
        for i, (width, k) in enumerate(zip(config.widths, config.kernels)):
            fan_in = c_in * k * k
            w = uniform_fan_in(rng, (width, c_in, k, k), fan_in)
            b = np.zeros(width)
            if i == last:
                # small positive start keeps every output cell inside the final ReLU's active range
                w = w * 0.1
                b = b + 0.05
            params.add(f"conv{i + 1}.w", w)
            params.add(f"conv{i + 1}.b", b)
            c_in = width
        return cls(params=params, config=config)

    @property
    def architecture(self) -> str:
        parts = []
        for i, (width, k) in enumerate(zip(self.config.widths, self.config.kernels)):
            parts.append(f"conv{k}x{k}x{width}")
            if i in _POOL_AFTER:
                parts.append("pool2")
        return "-".join(parts)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] % 4 or x.shape[3] % 4:
            raise RegressorError(f"regressor input must be NCHW with extents divisible by 4, got dims {x.dims}")
        h = x
        for i in range(len(self.config.widths)):
            h = relu(conv2d(h, self.params[f"conv{i + 1}.w"], self.params[f"conv{i + 1}.b"]))
            if i in _POOL_AFTER:
                h = maxpool2(h)
        return h

    def copy(self, reset_velocity: bool = True) -> "RegressorNet":
        return RegressorNet(params=self.params.copy(reset_velocity=reset_velocity), config=self.config)


def predict_rois(net: RegressorNet, images: Union[np.ndarray, Tensor], spec: PatchSpec) -> Tensor:
    """Batched RoI prediction, (N, 1, roi_h/4, roi_w/4); recorded unless under ``no_grad``."""
    x = as_tensor(images)
    if x.shape[2:] != (spec.patch_h, spec.patch_w):
        raise RegressorError(f"patches have dims {x.dims}, PatchSpec expects {spec.patch_h}x{spec.patch_w}")
    full = net.forward(x)
    mt, ml = spec.margin
    gh, gw = spec.roi_map_shape
    return full[:, :, mt // 4:mt // 4 + gh, ml // 4:ml // 4 + gw]


def predict(net: RegressorNet, patch: np.ndarray, spec: PatchSpec) -> DensityMap:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] % 4 or patch.shape[1] % 4:
        raise RegressorError(f"patch must be 2-D with extents divisible by 4, got dims {list(patch.shape)}")
    with no_grad():
        out = predict_rois(net, patch[None, None], spec)
    return DensityMap(out.data[0, 0])


def roi_maps(net: RegressorNet, bank: PatchBank, threads: Optional[int] = None) -> np.ndarray:
    """Predicted RoI density per patch of ``bank``, (P, roi_h/4, roi_w/4), frozen evaluation."""
    gh, gw = bank.spec.roi_map_shape
    if len(bank) == 0:
        return np.zeros((0, gh, gw))

    def run(rows: range) -> np.ndarray:
        with no_grad():
            return predict_rois(net, bank.images[rows.start:rows.stop], bank.spec).data[:, 0]

    return np.concatenate(ordered_map(run, chunk_ranges(len(bank)), threads))


def map_counts(maps: np.ndarray) -> np.ndarray:
    return maps.reshape(maps.shape[0], -1).sum(axis=1)


def roi_counts(net: RegressorNet, bank: PatchBank, threads: Optional[int] = None) -> np.ndarray:
    """Predicted RoI count per patch of ``bank``."""
    return map_counts(roi_maps(net, bank, threads))


def count_errors(net: RegressorNet, bank: PatchBank, threads: Optional[int] = None) -> np.ndarray:
    return np.abs(roi_counts(net, bank, threads) - bank.counts)


def count_error(net: RegressorNet, patch: np.ndarray, gt_count: float, spec: PatchSpec) -> float:
    """|predicted RoI count - GT RoI count| for a single patch."""
    return abs(predict(net, patch, spec).count - float(gt_count))


def _check_pair(predictions: Tensor, ground_truths: np.ndarray, op: str) -> np.ndarray:
    gt = np.asarray(ground_truths, dtype=np.float64)
    if predictions.shape != gt.shape:
        raise ShapeError(f"{op}: prediction dims {predictions.dims} do not match ground-truth dims {list(gt.shape)}")
    if predictions.ndim == 0 or predictions.shape[0] == 0:
        raise ShapeError(f"{op}: needs a nonempty batch, got dims {predictions.dims}")
    return gt


def l2_loss(predictions: Tensor, ground_truths: np.ndarray) -> Tensor:
    """(1 / 2N) * sum_i ||M_i - M_i^GT||^2"""
    gt = _check_pair(predictions, ground_truths, "l2_loss")
    diff = predictions - gt
    return (diff * diff).sum() / (2.0 * predictions.shape[0])


def count_loss(predictions: Tensor, ground_truths: np.ndarray, cfg: Optional[LossConfig] = None) -> Tensor:
    """(lambda / 2N) * sum_i (C_i - C_i^GT)^2; ``ground_truths`` are maps or a vector of counts."""
    cfg = cfg or LossConfig()
    gt = np.asarray(ground_truths, dtype=np.float64)
    n = predictions.shape[0] if predictions.ndim else 0
    gt_counts = gt if gt.ndim == 1 else _check_pair(predictions, gt, "count_loss").reshape(n, -1).sum(axis=1)
    if gt_counts.shape != (n,) or n == 0:
        raise ShapeError(f"count_loss: prediction dims {predictions.dims} vs ground-truth dims {list(gt.shape)}")
    counts = predictions.reshape(n, -1).sum(axis=1)
    diff = counts - gt_counts
    return (diff * diff).sum() * (cfg.lambda_ / (2.0 * n))


class PatchSource(Protocol):
    def draw(self, rng: np.random.Generator) -> PatchBank: ...


@dataclass
class PretrainResult:
    net: RegressorNet
    curve: pd.DataFrame
    best_val_mae: float
    best_epoch: int
    steps: int


def _apply_flips(images: np.ndarray, gts: np.ndarray, rng: np.random.Generator) -> tuple:
    mask = rng.random(images.shape[0]) < 0.5
    if mask.any():
        images, gts = images.copy(), gts.copy()
        images[mask], gts[mask] = flip_augment(images[mask], gts[mask])
    return images, gts


def pretrain(
    net: RegressorNet,
    train: PatchSource,
    val: PatchBank,
    cfg: PretrainConfig,
    rng: np.random.Generator,
    threads: Optional[int] = None,
) -> PretrainResult:
    """SGD+momentum on the density l2 loss; early stopping and checkpoint choice on validation MAE."""
    log = logger.bind(stage="pretrain")
    if len(val) == 0:
        raise RegressorError("pretraining needs a nonempty validation patch set")
    spec = val.spec
    stagnation = Stagnation(cfg.patience, cfg.min_rel_improvement)
    val_mae = float(np.mean(count_errors(net, val, threads)))
    stagnation.update(val_mae)
    best, best_mae, best_epoch = net.copy(), val_mae, 0
    rows = [{"epoch": 0, "step": 0, "train_l2": math.nan, "val_mae": val_mae}]
    step, last_finite = 0, math.nan
    for epoch in range(1, cfg.max_epochs + 1):
        batch = train.draw(rng)
        if len(batch) == 0:
            raise RegressorError("pretraining needs a nonempty training set")
        order = rng.permutation(len(batch))
        losses: List[float] = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images, gts = batch.images[idx], batch.gts[idx]
            if cfg.flip:
                images, gts = _apply_flips(images, gts, rng)
            loss = l2_loss(predict_rois(net, images, spec), gts)
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise RegressorError(f"pretraining diverged at step {step} (last finite loss {last_finite})")
            last_finite = value
            backward(loss)
            sgd_step(net.params, cfg.optim)
            losses.append(value)
        val_mae = float(np.mean(count_errors(net, val, threads)))
        rows.append({"epoch": epoch, "step": step, "train_l2": float(np.mean(losses)), "val_mae": val_mae})
        log.bind(epoch=epoch).info(f"train_l2={rows[-1]['train_l2']:.6g} val_mae={val_mae:.6g}")
        if val_mae < best_mae:
            best, best_mae, best_epoch = net.copy(), val_mae, epoch
        stagnation.update(val_mae)
        if stagnation.stalled:
            log.bind(epoch=epoch).info(f"validation MAE stagnated for {cfg.patience} evaluations")
            break
    curve = pd.DataFrame(rows, columns=["epoch", "step", "train_l2", "val_mae"])
    return PretrainResult(net=best, curve=curve, best_val_mae=best_mae, best_epoch=best_epoch, steps=step)


def save_regressor(net: RegressorNet, directory: Path, *, seed: int, step: int = 0, val_mae: Optional[float] = None, **extra) -> List[str]:
    directory = Path(directory)
    files = [f"params/{f}" for f in net.params.save(directory / "params")]
    manifest = CheckpointManifest(
        architecture=net.architecture,
        seed=seed,
        step=step,
        val_mae=val_mae,
        params=net.params.names(),
        extra={"widths": list(net.config.widths), "kernels": list(net.config.kernels), **extra},
    )
    (directory / "manifest.json").write_bytes(orjson.dumps(manifest.model_dump(), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return files + ["manifest.json"]


def load_regressor(directory: Path) -> RegressorNet:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise RegressorError(f"regressor checkpoint manifest not found: {path}")
    manifest = CheckpointManifest.model_validate(orjson.loads(path.read_bytes()))
    config = RegressorConfig(widths=tuple(manifest.extra["widths"]), kernels=tuple(manifest.extra["kernels"]))
    net = RegressorNet(params=ParamSet.load(directory / "params", manifest.params), config=config)
    if net.architecture != manifest.architecture:
        raise RegressorError(f"{directory}: stored architecture {manifest.architecture} != rebuilt {net.architecture}")
    return net

