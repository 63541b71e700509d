from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd

from .density import DensityError, DensityMap, PatchBank, grid_patches, stitch_predictions
from .logging import logger
from .metrics import Stagnation
from .parallel import chunk_ranges, ordered_map
from .regressor import RegressorNet, count_errors, predict_rois
from .schemas.core import ClassifierConfig, PatchSpec
from .schemas.manifest import CheckpointManifest
from .tensor import (
    ParamSet,
    Tensor,
    as_tensor,
    backward,
    conv2d,
    fully_connected,
    global_avg_pool,
    maxpool2,
    no_grad,
    relu,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    uniform_fan_in,
)


class ClassifierError(RuntimeError):
    pass


_KERNELS = (5, 3, 3)


@dataclass
class ClassifierNet:
    """conv5x5 -> pool -> conv3x3 -> pool -> conv3x3 -> GAP -> FC -> FC -> softmax over K experts."""

    params: ParamSet
    config: ClassifierConfig
    n_classes: int

    @classmethod
    def init(cls, config: ClassifierConfig, n_classes: int, rng: np.random.Generator) -> "ClassifierNet":
        if n_classes < 1:
            raise ClassifierError(f"classifier needs at least one class, got {n_classes}")
        params = ParamSet()
        c_in = 1
        for i, (width, k) in enumerate(zip(config.widths, _KERNELS)):
            params.add(f"conv{i + 1}.w", uniform_fan_in(rng, (width, c_in, k, k), c_in * k * k))
            params.add(f"conv{i + 1}.b", np.zeros(width))
            c_in = width
        params.add("fc1.w", uniform_fan_in(rng, (c_in, config.hidden), c_in))
        params.add("fc1.b", np.zeros(config.hidden))
        params.add("fc2.w", uniform_fan_in(rng, (config.hidden, n_classes), config.hidden, gain=0.5))
        params.add("fc2.b", np.zeros(n_classes))
        return cls(params=params, config=config, n_classes=n_classes)

    @property
    def architecture(self) -> str:
        w = self.config.widths
        return f"conv5x5x{w[0]}-pool2-conv3x3x{w[1]}-pool2-conv3x3x{w[2]}-gap-fc{self.config.hidden}-fc{self.n_classes}"

    def logits(self, rois: Tensor) -> Tensor:
        if rois.ndim != 4 or rois.shape[2] < 4 or rois.shape[3] < 4:
            raise ClassifierError(f"classifier input must be NCHW RoIs of at least 4x4, got dims {rois.dims}")
        h = rois
        for i in range(3):
            h = relu(conv2d(h, self.params[f"conv{i + 1}.w"], self.params[f"conv{i + 1}.b"]))
            if i < 2:
                h = maxpool2(h)
        h = relu(fully_connected(global_avg_pool(h), self.params["fc1.w"], self.params["fc1.b"]))
        return fully_connected(h, self.params["fc2.w"], self.params["fc2.b"])

    def probabilities(self, rois: Tensor) -> Tensor:
        return softmax(self.logits(rois))


def classify(net: ClassifierNet, rois: np.ndarray, threads: Optional[int] = None) -> np.ndarray:
    """Softmax probabilities per RoI, (N, K), frozen evaluation."""
    if len(rois) == 0:
        return np.zeros((0, net.n_classes))

    def run(rows: range) -> np.ndarray:
        with no_grad():
            return net.probabilities(as_tensor(rois[rows.start:rows.stop])).data

    return np.concatenate(ordered_map(run, chunk_ranges(len(rois)), threads))


@dataclass
class LabeledRoi:
    patch_id: str
    roi: np.ndarray  # (1, roi_h, roi_w)
    label: str
    weight: float = 1.0  # oversampling multiplicity after balance()


def labels_from_errors(errors: np.ndarray, addresses: Sequence[str]) -> List[str]:
    """Argmin expert per row; ties go to the smallest address."""
    order = sorted(range(len(addresses)), key=lambda i: addresses[i])
    errs = np.asarray(errors, dtype=np.float64)[:, order]
    return [addresses[order[j]] for j in np.argmin(errs, axis=1)]


def error_matrix(experts: Mapping[str, RegressorNet], bank: PatchBank, threads: Optional[int] = None) -> Tuple[List[str], np.ndarray]:
    """(sorted addresses, (P, K) count errors)."""
    addresses = sorted(experts)
    if not addresses:
        raise ClassifierError("no experts to evaluate")
    errs = np.stack([count_errors(experts[a], bank, threads) for a in addresses], axis=1) if len(bank) else np.zeros((0, len(addresses)))
    return addresses, errs


def make_labels(experts: Mapping[str, RegressorNet], bank: PatchBank, threads: Optional[int] = None) -> List[LabeledRoi]:
    addresses, errs = error_matrix(experts, bank, threads)
    labels = labels_from_errors(errs, addresses)
    rois = bank.rois()
    return [LabeledRoi(pid, rois[i], lab) for i, (pid, lab) in enumerate(zip(bank.ids, labels))]


@dataclass
class BalanceResult:
    samples: List[LabeledRoi]
    classes: List[str]  # reachable classes, sorted
    unreachable: List[str] = field(default_factory=list)

    def expanded_indices(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.samples)), [int(s.weight) for s in self.samples])

    def class_totals(self) -> Dict[str, float]:
        totals: Dict[str, float] = {c: 0.0 for c in self.classes}
        for s in self.samples:
            totals[s.label] += s.weight
        return totals


def balance(samples: Sequence[LabeledRoi], classes: Optional[Sequence[str]] = None) -> BalanceResult:
    """Oversample minority classes by repetition up to the majority class count.

    Samples are never dropped or invented; only their multiplicities (``weight``) change.
    Classes from ``classes`` without samples are reported as unreachable.
    """
    log = logger.bind(stage="classifier")
    groups: Dict[str, List[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.label, []).append(i)
    expected = sorted(set(classes or []) | set(groups))
    unreachable = [c for c in expected if c not in groups]
    for c in unreachable:
        log.warning(f"expert {c} wins no training patch; excluded from routing")
    out = [LabeledRoi(s.patch_id, s.roi, s.label, 1.0) for s in samples]
    if len(groups) < 2:
        log.warning(f"single class {list(groups)}: nothing to balance")
        return BalanceResult(out, sorted(groups), unreachable)
    target = max(len(v) for v in groups.values())
    for label, members in groups.items():
        reps, extra = divmod(target, len(members))
        for j, i in enumerate(members):
            out[i].weight = float(reps + (1 if j < extra else 0))
    return BalanceResult(out, sorted(groups), unreachable)


@dataclass
class ClassifierResult:
    net: ClassifierNet
    classes: List[str]
    accuracy: float  # percent, validation
    per_class_accuracy: Dict[str, float]
    curve: pd.DataFrame
    unreachable: List[str] = field(default_factory=list)


def _stack(samples: Sequence[LabeledRoi]) -> np.ndarray:
    return np.stack([s.roi for s in samples]) if samples else np.zeros((0, 1, 1, 1))


def accuracy_report(
    net: ClassifierNet, classes: Sequence[str], samples: Sequence[LabeledRoi], threads: Optional[int] = None
) -> Tuple[float, Dict[str, float]]:
    """Overall and per-class accuracy in percent; labels outside ``classes`` always count as misses."""
    if not samples:
        return math.nan, {}
    pred = np.argmax(classify(net, _stack(samples), threads), axis=1)
    labels = np.array([s.label for s in samples], dtype=object)
    hits = np.array([classes[p] for p in pred], dtype=object) == labels
    per_class = {c: float(100.0 * hits[labels == c].mean()) for c in sorted(set(labels))}
    return float(100.0 * hits.mean()), per_class


def train_classifier(
    train: BalanceResult,
    val: Sequence[LabeledRoi],
    cfg: ClassifierConfig,
    rng: np.random.Generator,
    threads: Optional[int] = None,
) -> ClassifierResult:
    """Softmax cross-entropy on RoI crops of the balanced set; keeps the best validation accuracy."""
    log = logger.bind(stage="classifier")
    classes = list(train.classes)
    if len(classes) < 2:
        raise ClassifierError(f"classifier training needs >= 2 reachable classes, got {classes}")
    index = {c: i for i, c in enumerate(classes)}
    rois = _stack(train.samples)
    labels = np.array([index[s.label] for s in train.samples], dtype=np.int64)
    pool = train.expanded_indices()
    eval_set = list(val) if val else list(train.samples)
    if not val:
        log.warning("empty validation set: accuracy is measured on the training RoIs")

    net = ClassifierNet.init(cfg, len(classes), rng)
    acc, per_class = accuracy_report(net, classes, eval_set, threads)
    best, best_acc, best_per_class = net.params.copy(reset_velocity=True), acc, per_class
    stagnation = Stagnation(cfg.patience, cfg.min_rel_improvement, mode="max")
    stagnation.update(acc)
    rows = [{"epoch": 0, "train_ce": math.nan, "val_accuracy": acc}]
    step, last_finite = 0, math.nan
    for epoch in range(1, cfg.max_epochs + 1):
        order = pool[rng.permutation(len(pool))]
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = softmax_cross_entropy(net.logits(as_tensor(rois[idx])), labels[idx])
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise ClassifierError(f"classifier training diverged at step {step} (last finite loss {last_finite})")
            last_finite = value
            backward(loss)
            sgd_step(net.params, cfg.optim)
            losses.append(value)
        acc, per_class = accuracy_report(net, classes, eval_set, threads)
        rows.append({"epoch": epoch, "train_ce": float(np.mean(losses)), "val_accuracy": acc})
        log.bind(epoch=epoch).info(f"train_ce={rows[-1]['train_ce']:.6g} val_accuracy={acc:.2f}%")
        if acc > best_acc:
            best, best_acc, best_per_class = net.params.copy(reset_velocity=True), acc, per_class
        stagnation.update(acc)
        if stagnation.stalled:
            break
    net = ClassifierNet(params=best, config=cfg, n_classes=len(classes))
    curve = pd.DataFrame(rows, columns=["epoch", "train_ce", "val_accuracy"])
    return ClassifierResult(net, classes, best_acc, best_per_class, curve, list(train.unreachable))


# ---------- routing ----------


class Router(Protocol):
    def route(self, bank: PatchBank, experts: Mapping[str, RegressorNet], threads: Optional[int] = None) -> List[str]: ...


@dataclass
class ClassifierRouter:
    net: ClassifierNet
    classes: List[str]

    def route(self, bank: PatchBank, experts: Mapping[str, RegressorNet], threads: Optional[int] = None) -> List[str]:
        probs = classify(self.net, bank.rois(), threads)
        return [self.classes[i] for i in np.argmax(probs, axis=1)]


@dataclass
class OracleRouter:
    """Routes every patch to the expert with the smallest count error (needs ground truth)."""

    def route(self, bank: PatchBank, experts: Mapping[str, RegressorNet], threads: Optional[int] = None) -> List[str]:
        addresses, errs = error_matrix(experts, bank, threads)
        return labels_from_errors(errs, addresses)


@dataclass
class ConstantRouter:
    address: str

    def route(self, bank: PatchBank, experts: Mapping[str, RegressorNet], threads: Optional[int] = None) -> List[str]:
        return [self.address] * len(bank)


def routed_roi_maps(
    router: Router, experts: Mapping[str, RegressorNet], bank: PatchBank, threads: Optional[int] = None
) -> Tuple[List[str], np.ndarray]:
    """Expert chosen per patch and its RoI prediction, (P, roi_h/4, roi_w/4)."""
    chosen = router.route(bank, experts, threads)
    gh, gw = bank.spec.roi_map_shape
    maps = np.zeros((len(bank), gh, gw))
    labels = np.asarray(chosen, dtype=object)
    for address in sorted(set(chosen)):
        if address not in experts:
            raise ClassifierError(f"router picked unknown expert {address!r}")
        idx = np.flatnonzero(labels == address)
        sub = bank.subset(idx)

        def run(rows: range, net: RegressorNet = experts[address], sub: PatchBank = sub) -> np.ndarray:
            with no_grad():
                return predict_rois(net, sub.images[rows.start:rows.stop], sub.spec).data[:, 0]

        maps[idx] = np.concatenate(ordered_map(run, chunk_ranges(len(sub)), threads))
    return chosen, maps


@dataclass
class _ImageScene:
    scene_id: str
    image: np.ndarray
    density: np.ndarray
    regime_label: str = "unknown"


def route_and_count(
    router: Router,
    experts: Mapping[str, RegressorNet],
    image: np.ndarray,
    spec: PatchSpec,
    *,
    density: Optional[np.ndarray] = None,
    threads: Optional[int] = None,
) -> Tuple[DensityMap, float]:
    """Slide the RoI over the image, let the router pick an expert per RoI, average overlaps."""
    if not experts:
        raise ClassifierError("route_and_count needs at least one expert")
    h, w = image.shape
    if h % 4 or w % 4:
        raise DensityError(f"image extents {h}x{w} must be divisible by 4 to stitch 1/4-scale maps")
    gt = density if density is not None else np.zeros_like(image)
    bank = grid_patches(_ImageScene("image", image, gt), spec)
    _, maps = routed_roi_maps(router, experts, bank, threads)
    placed = [(maps[i], (int(t) // 4, int(l) // 4)) for i, (t, l) in enumerate(bank.placements)]
    stitched = stitch_predictions(placed, (h // 4, w // 4))
    return stitched, stitched.count


def save_classifier(result: ClassifierResult, directory: Path, *, seed: int) -> List[str]:
    directory = Path(directory)
    files = [f"params/{f}" for f in result.net.params.save(directory / "params")]
    manifest = CheckpointManifest(
        architecture=result.net.architecture,
        seed=seed,
        val_mae=None,
        params=result.net.params.names(),
        classes=list(result.classes),
        extra={
            "accuracy": result.accuracy,
            "per_class_accuracy": result.per_class_accuracy,
            "unreachable": list(result.unreachable),
            "config": result.net.config.model_dump(mode="json"),
        },
    )
    (directory / "manifest.json").write_bytes(orjson.dumps(manifest.model_dump(), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return files + ["manifest.json"]


def load_classifier(directory: Path) -> ClassifierResult:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise ClassifierError(f"classifier checkpoint manifest not found: {path}")
    manifest = CheckpointManifest.model_validate(orjson.loads(path.read_bytes()))
    cfg = ClassifierConfig.model_validate(manifest.extra["config"])
    net = ClassifierNet(ParamSet.load(directory / "params", manifest.params), cfg, len(manifest.classes))
    return ClassifierResult(
        net=net,
        classes=list(manifest.classes),
        accuracy=float(manifest.extra.get("accuracy", math.nan)),
        per_class_accuracy=dict(manifest.extra.get("per_class_accuracy", {})),
        curve=pd.DataFrame(columns=["epoch", "train_ce", "val_accuracy"]),
        unreachable=list(manifest.extra.get("unreachable", [])),
    )
