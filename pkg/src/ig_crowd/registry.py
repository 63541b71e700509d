from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .adapters.folder_adapter import load_folder
from .baselines import MOE_TRAINING, MoEModel, compare_table, fit_nway, load_moe, load_nway, nway_differential_train, save_moe, save_nway, train_moe
from .classifier import load_classifier, save_classifier
from .config import derive_seed
from .density import PatchBank, SceneSampler, sample_patches
from .evaluation import evaluate_experts, evaluate_levels, evaluate_moe, expert_row, image_table, level_rows, specialty_frames
from .logging import logger
from .metrics import MetricsError, pooled_separation, profile_frame, regime_purity, specialty_profile
from .regressor import RegressorNet, load_regressor, pretrain, save_regressor
from .schemas.config import RunConfig
from .storage import file_sha256, has_manifest, read_json, read_manifest, stage_dir, write_csv, write_json
from .synth import DatasetBundle, Scene, generate_dataset, load_dataset, save_dataset, split
from .tree import ExpertTree, fit_level, grow, load_tree, node_dirname, save_tree


class StageError(RuntimeError):
    pass


@dataclass
class StageContext:
    config: RunConfig
    out: Path
    stage: str
    threads: int = 1
    options: Dict[str, Any] = field(default_factory=dict)

    def dir(self, stage: Optional[str] = None) -> Path:
        return stage_dir(self.out, stage or self.stage)

    def seed(self, name: str) -> int:
        return derive_seed(self.config.seed, name)

    @property
    def log(self):
        return logger.bind(stage=self.stage)


@dataclass
class StageOutput:
    files: List[str]
    method: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)


StageFunc = Callable[[StageContext], StageOutput]
OptionalDeps = Callable[[RunConfig], List[str]]


@dataclass
class StageSpec:
    name: str  # artifact directory under --out
    command: str  # CLI subcommand
    requires: List[str]
    run: StageFunc
    optional: Optional[OptionalDeps] = None  # used when present, never required
    method: Optional[str] = None
    parametrized_by: Optional[str] = None  # option appended to the artifact name, e.g. k -> baseline-nway-k4
    notes: Optional[str] = None

    def artifact(self, options: Dict[str, Any]) -> str:
        if self.parametrized_by is None:
            return self.name
        value = options.get(self.parametrized_by)
        if value is None:
            raise StageError(f"stage {self.name} needs option --{self.parametrized_by}")
        return f"{self.name}-{self.parametrized_by}{value}"


REGISTRY: Dict[str, StageSpec] = {}


def register(spec: StageSpec) -> None:
    REGISTRY[spec.name] = spec


def nway_stage(k: int) -> str:
    return f"baseline-nway-k{k}"


# ---------- shared inputs ----------


def _dataset(ctx: StageContext) -> DatasetBundle:
    return load_dataset(ctx.dir("data"))


def _patch_banks(ctx: StageContext, bundle: DatasetBundle) -> Tuple[List[Scene], PatchBank, PatchBank]:
    """Train scenes plus the fixed training / validation patch banks every training stage shares."""
    cfg = ctx.config
    train_scenes, val_scenes = bundle.subset("train"), bundle.subset("val")
    if not train_scenes:
        raise StageError("dataset has no training scenes")
    if not val_scenes:
        ctx.log.warning("dataset has no validation scenes; validating on training scenes")
        val_scenes = train_scenes
    seed = ctx.seed("patches")
    train = sample_patches(train_scenes, cfg.patch, cfg.data.patches_per_scene, np.random.default_rng([seed, 0]))
    val = sample_patches(val_scenes, cfg.patch, cfg.data.val_patches_per_scene, np.random.default_rng([seed, 1]))
    return train_scenes, train, val


def _root(ctx: StageContext) -> RegressorNet:
    return load_regressor(ctx.dir("pretrain") / "regressor")


def _test_scenes(ctx: StageContext, bundle: DatasetBundle) -> List[Scene]:
    scenes = bundle.subset("test")
    if not scenes:
        raise StageError("dataset has no test scenes (data.splits.test is 0?)")
    return scenes


def _classifier_is_current(ctx: StageContext) -> bool:
    """The retrained classifier was fitted on the experts of the current grow artifact."""
    if not has_manifest(ctx.out, "classifier"):
        return False
    recorded = read_manifest(ctx.out, "classifier").dependencies.get("grow")
    if recorded != file_sha256(ctx.dir("grow") / "manifest.json"):
        ctx.log.warning("classifier stage predates the current grow artifact; using the tree's own routers")
        return False
    return True


def _tree(ctx: StageContext) -> Tuple[ExpertTree, bool]:
    tree = load_tree(ctx.dir("grow"))
    retrained = _classifier_is_current(ctx)
    if retrained:
        meta = read_json(ctx.dir("classifier") / "router.json")
        state = tree.level(int(meta["level"]))
        path = ctx.dir("classifier") / "classifier"
        state.classifier = load_classifier(path) if (path / "manifest.json").exists() else None
        state.constant = meta.get("constant")
        ctx.log.info(f"level {state.level} routed by the retrained classifier")
    return tree, retrained


# ---------- stages ----------


def _run_data(ctx: StageContext) -> StageOutput:
    cfg = ctx.config.data
    folder = ctx.options.get("from_folder")
    if folder:
        scenes = load_folder(Path(folder), cfg.sigma)
        source = "folder"
    else:
        scenes = generate_dataset(
            cfg.regimes,
            cfg.scenes_per_regime,
            cfg.image_shape,
            ctx.seed("data"),
            sigma=cfg.sigma,
            region_shape=cfg.region_shape,
            threads=ctx.threads,
        )
        source = "synthetic"
    spec = ctx.config.patch
    small = [s.scene_id for s in scenes if s.image.shape[0] < spec.roi_h or s.image.shape[1] < spec.roi_w]
    if small:
        raise StageError(f"{len(small)} scene(s) smaller than the {spec.roi_h}x{spec.roi_w} RoI, first {small[0]}")
    train, val, test = split(scenes, cfg.splits.as_tuple(), ctx.seed("split"))
    meta = {
        "source": source,
        "sigma": cfg.sigma,
        "regimes": [r.model_dump(mode="json") for r in cfg.regimes] if source == "synthetic" else [],
        "splits": {
            "train": [s.scene_id for s in train],
            "val": [s.scene_id for s in val],
            "test": [s.scene_id for s in test],
        },
    }
    files = save_dataset(scenes, ctx.dir(), meta)
    rows = [
        {"scene_id": s.scene_id, "regime": s.regime_label, "split": name, "count": s.count}
        for name, part in (("train", train), ("val", val), ("test", test))
        for s in part
    ]
    write_csv(ctx.dir() / "splits.csv", pd.DataFrame(rows, columns=["scene_id", "regime", "split", "count"]))
    ctx.log.info(f"{len(scenes)} scenes: {len(train)} train / {len(val)} val / {len(test)} test")
    return StageOutput(files + ["splits.csv"], extra={"source": source, "n_train": len(train), "n_val": len(val), "n_test": len(test)})


def _run_pretrain(ctx: StageContext) -> StageOutput:
    cfg = ctx.config
    train_scenes, _, val = _patch_banks(ctx, _dataset(ctx))
    seed = ctx.seed("pretrain")
    net = RegressorNet.init(cfg.regressor, np.random.default_rng([seed, 0]))
    sampler = SceneSampler(train_scenes, cfg.patch, cfg.pretrain.patches_per_epoch)
    result = pretrain(net, sampler, val, cfg.pretrain, np.random.default_rng([seed, 1]), ctx.threads)
    files = [f"regressor/{f}" for f in save_regressor(
        result.net, ctx.dir() / "regressor", seed=cfg.seed, step=result.steps, val_mae=result.best_val_mae, best_epoch=result.best_epoch
    )]
    write_csv(ctx.dir() / "curve.csv", result.curve)
    return StageOutput(files + ["curve.csv"], extra={"best_val_mae": result.best_val_mae, "best_epoch": result.best_epoch})


def _run_grow(ctx: StageContext) -> StageOutput:
    cfg = ctx.config
    _, train, val = _patch_banks(ctx, _dataset(ctx))
    result = grow(_root(ctx), train, val, cfg.growth, cfg.classifier, cfg.seed, ctx.threads)
    files = save_tree(result, ctx.dir(), train.ids, val.ids, seed=cfg.seed)
    return StageOutput(files, extra={"served_level": result.tree.served_level, "levels": len(result.reports)})


def _run_classifier(ctx: StageContext) -> StageOutput:
    cfg = ctx.config
    _, train, val = _patch_banks(ctx, _dataset(ctx))
    tree = load_tree(ctx.dir("grow"))
    level = ctx.options.get("level")
    level = tree.served_level if level is None else int(level)
    experts = tree.experts(level)
    rng = np.random.default_rng([ctx.seed("classifier"), 1000 + level])
    fit = fit_level(experts, train, val, cfg.classifier, rng, ctx.threads)
    files: List[str] = []
    if fit.classifier is not None:
        files += [f"classifier/{f}" for f in save_classifier(fit.classifier, ctx.dir() / "classifier", seed=cfg.seed)]
        write_csv(ctx.dir() / "curve.csv", fit.classifier.curve)
        files.append("curve.csv")
    summary = {
        "level": level,
        "constant": fit.constant,
        "accuracy": fit.accuracy,
        "oracle_mae": fit.oracle_mae,
        "actual_mae": fit.actual_mae,
        "note": fit.note,
    }
    write_json(ctx.dir() / "router.json", summary)
    ctx.log.bind(level=level).info(f"accuracy={fit.accuracy:.2f}% actual_mae={fit.actual_mae:.6g}")
    return StageOutput(files + ["router.json"], extra=summary)


def _run_moe(ctx: StageContext) -> StageOutput:
    cfg = ctx.config
    moe = cfg.baselines.moe
    train_scenes, _, val = _patch_banks(ctx, _dataset(ctx))
    seed = ctx.seed("moe")
    model = MoEModel.from_base(_root(ctx), moe.n_experts, cfg.classifier, np.random.default_rng([seed, 0]))
    sampler = SceneSampler(train_scenes, cfg.patch, moe.patches_per_epoch)
    result = train_moe(model, sampler, val, moe, np.random.default_rng([seed, 1]), ctx.threads)
    files = [f"model/{f}" for f in save_moe(result.model, ctx.dir() / "model", seed=cfg.seed)]
    write_csv(ctx.dir() / "curve.csv", result.curve)
    return StageOutput(
        files + ["curve.csv"],
        method="moe",
        extra={"training": MOE_TRAINING, "n_experts": moe.n_experts, "best_val_mae": result.best_val_mae},
    )


def _run_nway(ctx: StageContext) -> StageOutput:
    cfg = ctx.config
    k = int(ctx.options["k"])
    _, train, val = _patch_banks(ctx, _dataset(ctx))
    result = nway_differential_train(_root(ctx), k, train, val, cfg.growth, cfg.seed, ctx.threads)
    rng = np.random.default_rng([ctx.seed("classifier"), 2000 + k])
    model, fit = fit_nway(result, train, val, cfg.classifier, rng, ctx.threads)
    files = [f"model/{f}" for f in save_nway(model, ctx.dir() / "model", seed=cfg.seed)]
    names = sorted(model.experts)
    write_csv(ctx.dir() / "history.csv", result.history)
    write_csv(ctx.dir() / "partition.csv", pd.DataFrame({"patch_id": train.ids, "expert": [names[int(j)] for j in result.assignment]}))
    extra = {
        "k": k,
        "initial_val_oracle_mae": result.initial_val_oracle,
        "val_oracle_mae": fit.oracle_mae,
        "val_actual_mae": fit.actual_mae,
        "classifier_accuracy": fit.accuracy,
    }
    return StageOutput(files + ["history.csv", "partition.csv"], method=f"nway-{k}", extra=extra)


def _evaluate_optional(config: RunConfig) -> List[str]:
    return ["classifier", "baseline-moe"] + [nway_stage(k) for k in config.baselines.nway_k]


def _run_evaluate(ctx: StageContext) -> StageOutput:
    cfg = ctx.config
    test = _test_scenes(ctx, _dataset(ctx))
    tree, retrained = _tree(ctx)
    evals = evaluate_levels(tree, test, cfg.patch, ctx.threads)
    served = tree.served_level
    methods = {
        "base": expert_row("base", evals[0], note="pretrained regressor"),
        "ig-tree": expert_row("ig-tree", evals[served], note=f"level {served}"),
    }
    images = {f"level-{lv}": ev.images for lv, ev in evals.items()}
    if has_manifest(ctx.out, "baseline-moe"):
        moe_eval = evaluate_moe(load_moe(ctx.dir("baseline-moe") / "model"), test, cfg.patch, ctx.threads)
        methods["moe"] = moe_eval.row(cfg.baselines.moe.n_experts, note=MOE_TRAINING)
        images["moe"] = moe_eval.images
    else:
        methods["moe"] = None
    for k in cfg.baselines.nway_k:
        name = nway_stage(k)
        if not has_manifest(ctx.out, name):
            methods[f"nway-{k}"] = None
            continue
        model = load_nway(ctx.dir(name) / "model")
        ev = evaluate_experts(model.experts, model.router(), test, cfg.patch, ctx.threads, method=f"nway-{k}")
        methods[f"nway-{k}"] = expert_row(f"nway-{k}", ev)
        images[f"nway-{k}"] = ev.images
    levels = level_rows(tree, evals)
    table = compare_table(methods)
    specialty = pd.concat([specialty_frames(ev, level=lv) for lv, ev in evals.items()], ignore_index=True)
    write_csv(ctx.dir() / "levels.csv", levels)
    write_csv(ctx.dir() / "methods.csv", table)
    write_csv(ctx.dir() / "specialty.csv", specialty)
    write_csv(ctx.dir() / "image_counts.csv", image_table(images))
    write_json(ctx.dir() / "methods.json", table.to_dict(orient="records"))
    files = ["levels.csv", "methods.csv", "specialty.csv", "image_counts.csv", "methods.json"]
    return StageOutput(files, extra={"served_level": served, "methods": list(table["method"]), "retrained_classifier": retrained})


def _separation_rows(tree: ExpertTree, level: int, assignment: List[str], counts: np.ndarray, mode: str) -> List[Dict[str, Any]]:
    """Sibling leaves of ``level`` compared on the counts each one receives."""
    labels = np.asarray(assignment, dtype=object)
    leaves = set(tree.leaves(level))
    rows = []
    for parent, node in sorted(tree.nodes.items()):
        if len(node.children) != 2 or not set(node.children) <= leaves:
            continue
        a, b = (counts[labels == c] for c in node.children)
        try:
            sep = pooled_separation(a, b)
        except MetricsError:
            sep = float("nan")
        rows.append(
            {
                "level": level,
                "mode": mode,
                "parent": node_dirname(parent),
                "n_0": int(a.size),
                "n_1": int(b.size),
                "mean_0": float(a.mean()) if a.size else float("nan"),
                "mean_1": float(b.mean()) if b.size else float("nan"),
                "separation": sep,
            }
        )
    return rows


def _run_analyze(ctx: StageContext) -> StageOutput:
    cfg = ctx.config
    bundle = _dataset(ctx)
    _, train, _ = _patch_banks(ctx, bundle)
    test = _test_scenes(ctx, bundle)
    tree = load_tree(ctx.dir("grow"))
    evals = evaluate_levels(tree, test, cfg.patch, ctx.threads)
    profiles, separation, purity, specialty = [], [], [], []
    for state in tree.levels:
        if len(state.partition) != len(train):
            raise StageError(f"level {state.level} partition covers {len(state.partition)} patches, training bank has {len(train)}")
        names = [node_dirname(a) for a in state.partition]
        profile = specialty_profile(names, train.counts, [node_dirname(a) for a in state.leaves])
        profiles.append(profile_frame(profile, level=state.level, split="train"))
        table = regime_purity(names, train.regimes)
        table.insert(0, "level", state.level)
        purity.append(table)
        ev = evals[state.level]
        specialty.append(specialty_frames(ev, level=state.level))
        separation += _separation_rows(tree, state.level, list(state.partition), train.counts, "train-partition")
        separation += _separation_rows(tree, state.level, ev.labels, ev.bank.counts, "oracle")
        separation += _separation_rows(tree, state.level, ev.chosen, ev.bank.counts, "classifier")
    sep_cols = ["level", "mode", "parent", "n_0", "n_1", "mean_0", "mean_1", "separation"]
    write_csv(ctx.dir() / "train_profiles.csv", pd.concat(profiles, ignore_index=True))
    write_csv(ctx.dir() / "specialty.csv", pd.concat(specialty, ignore_index=True))
    write_csv(ctx.dir() / "separation.csv", pd.DataFrame(separation, columns=sep_cols))
    write_csv(ctx.dir() / "regime_purity.csv", pd.concat(purity, ignore_index=True))
    return StageOutput(["train_profiles.csv", "specialty.csv", "separation.csv", "regime_purity.csv"])


register(StageSpec("data", "gen-data", [], _run_data, notes="synthetic scenes or --from-folder, split by scene"))
register(StageSpec("pretrain", "pretrain", ["data"], _run_pretrain))
register(StageSpec("grow", "grow", ["data", "pretrain"], _run_grow))
register(StageSpec("classifier", "train-classifier", ["data", "grow"], _run_classifier, notes="retrains the router of one level"))
register(StageSpec("evaluate", "evaluate", ["data", "grow"], _run_evaluate, optional=_evaluate_optional))
register(StageSpec("baseline-moe", "baseline", ["data", "pretrain"], _run_moe, method="moe"))
register(StageSpec("baseline-nway", "baseline", ["data", "pretrain"], _run_nway, method="nway", parametrized_by="k"))
register(StageSpec("analyze", "analyze", ["data", "grow"], _run_analyze))
