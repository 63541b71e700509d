from .density import DensityMap, PatchBank, make_density_map, stitch_predictions
from .synth import generate_dataset, split
from .regressor import RegressorNet, count_error, count_loss, l2_loss, predict, pretrain
from .classifier import ClassifierNet, balance, make_labels, route_and_count, train_classifier
from .tree import differential_train, grow, oracle_mae, select_best
from .baselines import MoEModel, moe_predict, nway_differential_train, compare_table
from .metrics import mae, mse, specialty_profile
from .pipeline import load_config, run_stage

__all__ = [
    "DensityMap",
    "PatchBank",
    "make_density_map",
    "stitch_predictions",
    "generate_dataset",
    "split",
    "RegressorNet",
    "count_error",
    "count_loss",
    "l2_loss",
    "predict",
    "pretrain",
    "ClassifierNet",
    "balance",
    "make_labels",
    "route_and_count",
    "train_classifier",
    "differential_train",
    "grow",
    "oracle_mae",
    "select_best",
    "MoEModel",
    "moe_predict",
    "nway_differential_train",
    "compare_table",
    "mae",
    "mse",
    "specialty_profile",
    "load_config",
    "run_stage",
]

__version__ = "0.1.0"
