from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd

from .classifier import (
    BalanceResult,
    ClassifierResult,
    ClassifierRouter,
    ConstantRouter,
    LabeledRoi,
    Router,
    balance,
    error_matrix,
    labels_from_errors,
    load_classifier,
    save_classifier,
    train_classifier,
)
from .config import derive_seed
from .density import PatchBank
from .logging import logger
from .metrics import Stagnation, level_table, specialty_profile
from .regressor import RegressorNet, count_errors, count_loss, load_regressor, predict_rois, save_regressor
from .schemas.core import ClassifierConfig, GrowthConfig, LevelReport, OptimConfig, LossConfig
from .tensor import backward, sgd_step


class TreeError(RuntimeError):
    pass


ROOT = ""


def node_dirname(address: str) -> str:
    return address or "root"


def select_best(e0: float, e1: float, tie_epsilon: float = 0.0) -> int:
    """0 when e0 is within ``tie_epsilon`` of (or below) e1; the first child wins ties."""
    return int(best_from_errors(np.array([[e0, e1]]), tie_epsilon)[0])


def best_from_errors(errors: np.ndarray, tie_epsilon: float = 0.0) -> np.ndarray:
    """Per row, the lowest index whose error is within ``tie_epsilon`` of the row minimum."""
    errs = np.asarray(errors, dtype=np.float64)
    if errs.ndim != 2 or errs.shape[1] == 0:
        raise TreeError(f"errors must be (patches, experts), got dims {list(errs.shape)}")
    ok = errs <= errs.min(axis=1, keepdims=True) + tie_epsilon
    return np.argmax(ok, axis=1)


def oracle_from_errors(errors: np.ndarray) -> float:
    errs = np.asarray(errors, dtype=np.float64)
    if errs.ndim != 2 or errs.shape[0] == 0:
        raise TreeError("oracle MAE needs a nonempty patch set")
    if errs.shape[1] == 0:
        raise TreeError("oracle MAE needs at least one expert")
    return float(errs.min(axis=1).mean())


def expert_errors(experts: Sequence[RegressorNet], bank: PatchBank, threads: Optional[int] = None) -> np.ndarray:
    if not experts:
        raise TreeError("no experts to evaluate")
    if len(bank) == 0:
        return np.zeros((0, len(experts)))
    return np.stack([count_errors(net, bank, threads) for net in experts], axis=1)


def oracle_mae(experts: Sequence[RegressorNet], bank: PatchBank, threads: Optional[int] = None) -> float:
    """Mean over patches of the smallest count error over ``experts``."""
    if len(bank) == 0:
        raise TreeError("oracle MAE needs a nonempty patch set")
    return oracle_from_errors(expert_errors(experts, bank, threads))


def fine_tune_step(net: RegressorNet, bank: PatchBank, rows: np.ndarray, optim: OptimConfig, loss_cfg: LossConfig) -> float:
    """One count-loss SGD step on ``rows`` of ``bank``; touches only ``net``."""
    loss = count_loss(predict_rois(net, bank.images[rows], bank.spec), bank.counts[rows], loss_cfg)
    value = loss.item()
    if not math.isfinite(value):
        raise TreeError(f"count-loss fine-tuning diverged (loss {value})")
    backward(loss)
    sgd_step(net.params, optim)
    return value


@dataclass
class DifferentialResult:
    experts: List[RegressorNet]
    assignment: np.ndarray  # train patch -> expert index, at the returned checkpoint
    val_assignment: np.ndarray
    history: pd.DataFrame
    best_epoch: int

    @property
    def initial_val_oracle(self) -> float:
        return float(self.history["val_oracle_mae"].iloc[0])

    @property
    def best_val_oracle(self) -> float:
        return float(self.history["val_oracle_mae"].iloc[self.best_epoch])


def train_experts(
    experts: List[RegressorNet],
    train: PatchBank,
    val: PatchBank,
    cfg: GrowthConfig,
    rng: np.random.Generator,
    threads: Optional[int] = None,
    label: str = ROOT,
) -> DifferentialResult:
    """Differential training of K experts on one subset.

    Each epoch re-assigns every patch to its best expert (ties to the lowest index),
    then fine-tunes each expert with the count loss on its own patches only. Stops when
    the validation Oracle MAE stagnates; returns the best-oracle checkpoints.
    """
    log = logger.bind(stage="differential", leaf=node_dirname(label))
    if len(train) < 2:
        raise TreeError(f"leaf {node_dirname(label)} holds {len(train)} patches; differential training needs >= 2")
    if len(experts) < 2:
        raise TreeError(f"differential training needs >= 2 experts, got {len(experts)}")
    k = len(experts)
    stagnation = Stagnation(cfg.inner_patience, cfg.min_rel_improvement)
    rows = []
    best: Optional[Tuple[List[RegressorNet], np.ndarray, np.ndarray, int]] = None
    best_val = math.inf
    for epoch in range(cfg.max_inner_epochs + 1):
        train_err = expert_errors(experts, train, threads)
        assign = best_from_errors(train_err, cfg.tie_epsilon)
        val_err = expert_errors(experts, val, threads)
        val_oracle = oracle_from_errors(val_err)
        row = {"epoch": epoch, "train_oracle_mae": oracle_from_errors(train_err), "val_oracle_mae": val_oracle}
        row.update({f"share_{j}": float(np.mean(assign == j)) for j in range(k)})
        rows.append(row)
        log.bind(epoch=epoch).info(f"train_oracle={row['train_oracle_mae']:.6g} val_oracle={val_oracle:.6g}")
        if best is None or val_oracle < best_val:
            best_val = val_oracle
            best = ([e.copy(reset_velocity=False) for e in experts], assign, best_from_errors(val_err, cfg.tie_epsilon), epoch)
        stagnation.update(val_oracle)
        if stagnation.stalled or epoch == cfg.max_inner_epochs:
            break
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for j in range(k):
                sel = idx[assign[idx] == j]
                if sel.size:
                    fine_tune_step(experts[j], train, sel, cfg.fine_tune, cfg.loss)
    assert best is not None
    nets, assign, val_assign, best_epoch = best
    history = pd.DataFrame(rows)
    return DifferentialResult(nets, assign, val_assign, history, best_epoch)


def replicate(parent: RegressorNet, k: int = 2) -> List[RegressorNet]:
    """k bitwise copies of ``parent`` with fresh momentum buffers."""
    return [parent.copy(reset_velocity=True) for _ in range(k)]


def differential_train(
    parent: RegressorNet,
    train: PatchBank,
    val: PatchBank,
    cfg: GrowthConfig,
    rng: np.random.Generator,
    threads: Optional[int] = None,
    label: str = ROOT,
) -> DifferentialResult:
    """Split leaf ``label`` into two children specialised on its subset."""
    return train_experts(replicate(parent, 2), train, val, cfg, rng, threads, label)


def split_rng(seed: int, address: str) -> np.random.Generator:
    """RNG for splitting the leaf at ``address``; the root split doubles as flat 2-way training."""
    return np.random.default_rng(derive_seed(seed, f"split:{address}"))


def plan_splits(partition: Sequence[str], leaves: Sequence[str], min_split_fraction: float) -> Tuple[List[str], Dict[str, str]]:
    """Leaves to split this level, and the reason each other leaf is kept whole."""
    labels = np.asarray(list(partition), dtype=object)
    total = max(len(labels), 1)
    eligible, skipped = [], {}
    for leaf in sorted(leaves):
        n = int(np.sum(labels == leaf))
        if n / total < min_split_fraction:
            skipped[leaf] = f"holds {n / total:.2%} of the patches (< {min_split_fraction:.2%})"
        elif n < 2:
            skipped[leaf] = f"holds {n} patch(es); needs >= 2"
        else:
            eligible.append(leaf)
    return eligible, skipped


@dataclass
class TreeNode:
    address: str
    net: RegressorNet
    n_train: int
    children: Tuple[str, ...] = ()


@dataclass
class LevelState:
    level: int
    leaves: List[str]
    report: LevelReport
    classifier: Optional[ClassifierResult] = None
    constant: Optional[str] = None
    partition: List[str] = field(default_factory=list)
    val_partition: List[str] = field(default_factory=list)

    def router(self) -> Router:
        if self.classifier is not None:
            return ClassifierRouter(self.classifier.net, self.classifier.classes)
        return ConstantRouter(self.constant if self.constant is not None else self.leaves[0])


@dataclass
class ExpertTree:
    nodes: Dict[str, TreeNode]
    levels: List[LevelState] = field(default_factory=list)
    served_level: int = 0

    def level(self, level: Optional[int] = None) -> LevelState:
        lv = self.served_level if level is None else level
        if not 0 <= lv < len(self.levels):
            raise TreeError(f"tree has levels 0..{len(self.levels) - 1}, asked for {lv}")
        return self.levels[lv]

    def leaves(self, level: Optional[int] = None) -> List[str]:
        return list(self.level(level).leaves)

    def experts(self, level: Optional[int] = None) -> Dict[str, RegressorNet]:
        return {a: self.nodes[a].net for a in self.leaves(level)}

    def router(self, level: Optional[int] = None) -> Router:
        return self.level(level).router()

    @property
    def reports(self) -> List[LevelReport]:
        return [s.report for s in self.levels]


@dataclass
class LevelFit:
    """Classifier + validation metrics for one leaf set."""

    classifier: Optional[ClassifierResult]
    constant: Optional[str]
    oracle_mae: float
    actual_mae: float
    accuracy: float
    train_oracle_mae: float
    note: Optional[str] = None
    routed: List[str] = field(default_factory=list)  # validation patch -> chosen leaf


def fit_level(
    experts: Mapping[str, RegressorNet],
    train: PatchBank,
    val: PatchBank,
    cfg: ClassifierConfig,
    rng: np.random.Generator,
    threads: Optional[int] = None,
) -> LevelFit:
    """Label patches by their best expert, train the router, and score it on ``val``."""
    addresses, train_err = error_matrix(experts, train, threads)
    _, val_err = error_matrix(experts, val, threads)
    train_labels = labels_from_errors(train_err, addresses)
    val_labels = labels_from_errors(val_err, addresses)
    train_rois, val_rois = train.rois(), val.rois()
    train_set = [LabeledRoi(pid, train_rois[i], lab) for i, (pid, lab) in enumerate(zip(train.ids, train_labels))]
    val_set = [LabeledRoi(pid, val_rois[i], lab) for i, (pid, lab) in enumerate(zip(val.ids, val_labels))]
    balanced: BalanceResult = balance(train_set, addresses)
    note = f"unreachable experts: {', '.join(node_dirname(a) for a in balanced.unreachable)}" if balanced.unreachable else None

    classifier: Optional[ClassifierResult] = None
    constant: Optional[str] = None
    if len(balanced.classes) >= 2:
        classifier = train_classifier(balanced, val_set, cfg, rng, threads)
        chosen = ClassifierRouter(classifier.net, classifier.classes).route(val, experts, threads)
    else:
        constant = balanced.classes[0] if balanced.classes else addresses[0]
        chosen = [constant] * len(val)
    col = {a: i for i, a in enumerate(addresses)}
    routed_err = val_err[np.arange(len(val)), [col[c] for c in chosen]]
    accuracy = float(100.0 * np.mean(np.asarray(chosen, dtype=object) == np.asarray(val_labels, dtype=object)))
    return LevelFit(
        classifier=classifier,
        constant=constant,
        oracle_mae=oracle_from_errors(val_err),
        actual_mae=float(routed_err.mean()),
        accuracy=accuracy,
        train_oracle_mae=oracle_from_errors(train_err),
        note=note,
        routed=list(chosen),
    )


def _shares(partition: Sequence[str], leaves: Sequence[str]) -> Dict[str, float]:
    labels = np.asarray(list(partition), dtype=object)
    return {node_dirname(a): float(np.sum(labels == a)) / len(labels) for a in leaves}


def _report(level: int, leaves: List[str], fit: LevelFit, partition: List[str], val: PatchBank, note: Optional[str]) -> LevelReport:
    # shares follow the training partition, the profile follows the router
    profile = specialty_profile([node_dirname(a) for a in fit.routed], val.counts, [node_dirname(a) for a in leaves])
    notes = "; ".join(n for n in (fit.note, note) if n) or None
    return LevelReport(
        level=level,
        n_experts=len(leaves),
        oracle_mae=fit.oracle_mae,
        actual_mae=fit.actual_mae,
        classifier_accuracy=fit.accuracy,
        train_oracle_mae=fit.train_oracle_mae,
        shares=_shares(partition, leaves),
        profile=profile,
        note=notes,
    )


@dataclass
class GrowthResult:
    tree: ExpertTree
    reports: List[LevelReport]
    histories: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        return level_table([r.table_row() for r in self.reports])


def grow(
    root: RegressorNet,
    train: PatchBank,
    val: PatchBank,
    cfg: GrowthConfig,
    classifier_cfg: ClassifierConfig,
    seed: int,
    threads: Optional[int] = None,
) -> GrowthResult:
    """Grow the expert tree level by level from the pretrained ``root``.

    ``seed`` is the run seed; split RNGs come from its ``differential`` sub-seed and
    classifier RNGs from its ``classifier`` sub-seed.
    """
    log = logger.bind(stage="grow")
    if len(train) == 0 or len(val) == 0:
        raise TreeError(f"growth needs nonempty train and validation patch sets, got {len(train)} and {len(val)}")
    diff_seed = derive_seed(seed, "differential")
    clf_seed = derive_seed(seed, "classifier")
    nodes: Dict[str, TreeNode] = {ROOT: TreeNode(ROOT, root, len(train))}
    partition = [ROOT] * len(train)
    val_partition = [ROOT] * len(val)
    leaves = [ROOT]

    fit0 = fit_level({ROOT: root}, train, val, classifier_cfg, np.random.default_rng([clf_seed, 0]), threads)
    tree = ExpertTree(nodes=nodes)
    tree.levels.append(
        LevelState(0, list(leaves), _report(0, leaves, fit0, partition, val, None), None, ROOT, list(partition), list(val_partition))
    )
    log.bind(level=0).info(f"root oracle_mae={fit0.oracle_mae:.6g} actual_mae={fit0.actual_mae:.6g}")
    outer = Stagnation(cfg.outer_patience, cfg.min_rel_improvement)
    outer.update(fit0.actual_mae)
    histories: Dict[str, pd.DataFrame] = {}

    for level in range(1, cfg.max_tree_depth + 1):
        eligible, skipped = plan_splits(partition, leaves, cfg.min_split_fraction)
        for leaf, why in skipped.items():
            log.bind(level=level, leaf=node_dirname(leaf)).warning(f"not split: {why}")
        if not eligible:
            log.bind(level=level).warning("no eligible leaves; growth stops")
            prev = tree.levels[-1].report
            tree.levels[-1].report = prev.model_copy(update={"note": "; ".join(filter(None, [prev.note, "no eligible leaves to split"]))})
            break
        labels = np.asarray(partition, dtype=object)
        val_labels = np.asarray(val_partition, dtype=object)
        for leaf in eligible:
            tr_idx = np.flatnonzero(labels == leaf)
            va_idx = np.flatnonzero(val_labels == leaf)
            sub_train = train.subset(tr_idx)
            if va_idx.size:
                sub_val = val.subset(va_idx)
            else:
                log.bind(level=level, leaf=node_dirname(leaf)).warning("empty validation subset; monitoring on the training subset")
                sub_val = sub_train
            result = differential_train(nodes[leaf].net, sub_train, sub_val, cfg, split_rng(diff_seed, leaf), threads, leaf)
            histories[node_dirname(leaf)] = result.history
            kids = tuple(leaf + str(j) for j in range(2))
            nodes[leaf].children = kids
            for j, kid in enumerate(kids):
                nodes[kid] = TreeNode(kid, result.experts[j], int(np.sum(result.assignment == j)))
            for pos, j in zip(tr_idx, result.assignment):
                partition[pos] = kids[int(j)]
            if va_idx.size:
                for pos, j in zip(va_idx, result.val_assignment):
                    val_partition[pos] = kids[int(j)]
        leaves = sorted([a for a in leaves if a not in eligible] + [leaf + str(j) for leaf in eligible for j in range(2)])
        experts = {a: nodes[a].net for a in leaves}
        fit = fit_level(experts, train, val, classifier_cfg, np.random.default_rng([clf_seed, level]), threads)
        note = f"kept whole: {', '.join(node_dirname(a) for a in skipped)}" if skipped else None
        report = _report(level, leaves, fit, partition, val, note)
        tree.levels.append(LevelState(level, list(leaves), report, fit.classifier, fit.constant, list(partition), list(val_partition)))
        log.bind(level=level).info(
            f"{len(leaves)} experts oracle_mae={fit.oracle_mae:.6g} actual_mae={fit.actual_mae:.6g} "
            f"accuracy={fit.accuracy:.2f}% train_oracle_mae={fit.train_oracle_mae:.6g}"
        )
        outer.update(fit.actual_mae)
        if outer.stalled:
            log.bind(level=level).info(f"validation actual MAE stagnated for {cfg.outer_patience} level(s)")
            break

    maes = [s.report.actual_mae for s in tree.levels]
    tree.served_level = int(np.argmin(maes))
    return GrowthResult(tree=tree, reports=tree.reports, histories=histories)


def _dump(obj) -> bytes:
    return orjson.dumps(obj, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)


def save_tree(result: GrowthResult, directory: Path, train_ids: Sequence[str], val_ids: Sequence[str], *, seed: int) -> List[str]:
    """nodes/<address>/ checkpoints, levels/<l>/ classifiers + partitions, reports as JSON and CSV."""
    directory = Path(directory)
    tree = result.tree
    files: List[str] = []
    for address, node in sorted(tree.nodes.items()):
        sub = f"nodes/{node_dirname(address)}"
        files += [f"{sub}/{f}" for f in save_regressor(node.net, directory / sub, seed=seed, address=address, n_train=node.n_train)]
    levels_meta = []
    for state in tree.levels:
        sub = f"levels/{state.level}"
        (directory / sub).mkdir(parents=True, exist_ok=True)
        if state.classifier is not None:
            files += [f"{sub}/classifier/{f}" for f in save_classifier(state.classifier, directory / sub / "classifier", seed=seed)]
        pd.DataFrame({"patch_id": list(train_ids), "leaf_address": [node_dirname(a) for a in state.partition]}).to_csv(
            directory / sub / "partition.csv", index=False
        )
        pd.DataFrame({"patch_id": list(val_ids), "leaf_address": [node_dirname(a) for a in state.val_partition]}).to_csv(
            directory / sub / "val_partition.csv", index=False
        )
        files += [f"{sub}/partition.csv", f"{sub}/val_partition.csv"]
        levels_meta.append({"level": state.level, "leaves": state.leaves, "constant": state.constant, "report": state.report.model_dump()})
    last = tree.levels[-1]
    pd.DataFrame({"patch_id": list(train_ids), "leaf_address": [node_dirname(a) for a in last.partition]}).to_csv(
        directory / "partition.csv", index=False
    )
    for name, hist in sorted(result.histories.items()):
        hist.to_csv(directory / f"history_{name}.csv", index=False)
        files.append(f"history_{name}.csv")
    meta = {
        "nodes": {node_dirname(a): {"address": a, "children": list(n.children), "n_train": n.n_train} for a, n in tree.nodes.items()},
        "levels": levels_meta,
        "served_level": tree.served_level,
    }
    (directory / "tree.json").write_bytes(_dump(meta))
    (directory / "reports.json").write_bytes(_dump([r.model_dump() for r in result.reports]))
    result.table().to_csv(directory / "reports.csv", index=False)
    return files + ["partition.csv", "tree.json", "reports.json", "reports.csv"]


def _read_partition(path: Path) -> List[str]:
    # addresses such as "01" must stay strings
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    return [ROOT if a == "root" else a for a in df["leaf_address"]]


def load_tree(directory: Path) -> ExpertTree:
    directory = Path(directory)
    path = directory / "tree.json"
    if not path.exists():
        raise TreeError(f"tree checkpoint not found: {path}")
    meta = orjson.loads(path.read_bytes())
    nodes: Dict[str, TreeNode] = {}
    for name, info in meta["nodes"].items():
        net = load_regressor(directory / "nodes" / name)
        nodes[info["address"]] = TreeNode(info["address"], net, int(info["n_train"]), tuple(info["children"]))
    tree = ExpertTree(nodes=nodes, served_level=int(meta["served_level"]))
    for lv in meta["levels"]:
        sub = directory / "levels" / str(lv["level"])
        classifier = load_classifier(sub / "classifier") if (sub / "classifier" / "manifest.json").exists() else None
        partition = _read_partition(sub / "partition.csv")
        val_partition = _read_partition(sub / "val_partition.csv")
        tree.levels.append(
            LevelState(
                level=int(lv["level"]),
                leaves=list(lv["leaves"]),
                report=LevelReport.model_validate(lv["report"]),
                classifier=classifier,
                constant=lv.get("constant"),
                partition=partition,
                val_partition=val_partition,
            )
        )
    return tree
