import numpy as np
import pytest

from ig_crowd.density import sample_patches
from ig_crowd.regressor import RegressorNet
from ig_crowd.schemas.config import RunConfig
from ig_crowd.schemas.core import ClassifierConfig, GrowthConfig, OptimConfig, PatchSpec, RegimeSpec, RegressorConfig
from ig_crowd.synth import generate_dataset

TINY_PATCH = PatchSpec(patch_w=16, patch_h=16, roi_w=8, roi_h=8)
TINY_REGRESSOR = RegressorConfig(widths=(4, 4, 4, 4, 1), kernels=(3, 3, 3, 3, 1))
TINY_CLASSIFIER = ClassifierConfig(widths=(4, 4, 4), hidden=8, batch_size=8, max_epochs=3, patience=3)
TINY_REGIMES = [
    RegimeSpec(name="sparse", count_range=(0, 3), dot_radius_range=(2.0, 3.0)),
    RegimeSpec(name="dense", count_range=(20, 40), dot_radius_range=(1.0, 1.5)),
]


def tiny_growth(**kw) -> GrowthConfig:
    base = dict(max_tree_depth=1, max_inner_epochs=2, inner_patience=2, batch_size=4, fine_tune=OptimConfig(learning_rate=1e-5))
    base.update(kw)
    return GrowthConfig(**base)


def tiny_run_config(**kw) -> RunConfig:
    data = {
        "regimes": [r.model_dump() for r in TINY_REGIMES],
        "scenes_per_regime": 4,
        "image_shape": (32, 32),
        "region_shape": (32, 32),
        "sigma": 1.0,
        "splits": {"train": 0.5, "val": 0.25, "test": 0.25},
        "patches_per_scene": 4,
        "val_patches_per_scene": 2,
    }
    cfg = {
        "seed": 11,
        "data": data,
        "patch": TINY_PATCH.model_dump(),
        "regressor": TINY_REGRESSOR.model_dump(),
        "pretrain": {"max_epochs": 2, "patches_per_epoch": 16, "batch_size": 4, "optim": {"learning_rate": 1e-4}},
        "growth": {"max_tree_depth": 1, "max_inner_epochs": 1, "batch_size": 4, "fine_tune": {"learning_rate": 1e-5}},
        "classifier": {"widths": (4, 4, 4), "hidden": 4, "max_epochs": 2, "batch_size": 8},
        "baselines": {"moe": {"n_experts": 2, "max_epochs": 1, "patches_per_epoch": 8, "batch_size": 4}, "nway_k": [2]},
    }
    cfg.update(kw)
    return RunConfig.model_validate(cfg)


@pytest.fixture
def spec():
    return TINY_PATCH


@pytest.fixture(scope="session")
def tiny_scenes():
    return generate_dataset(TINY_REGIMES, 6, (32, 32), seed=3, sigma=1.0, region_shape=(32, 32))


@pytest.fixture
def tiny_net():
    return RegressorNet.init(TINY_REGRESSOR, np.random.default_rng(0))


@pytest.fixture
def bank(tiny_scenes):
    return sample_patches(tiny_scenes, TINY_PATCH, 4, np.random.default_rng(1))


@pytest.fixture
def val_bank(tiny_scenes):
    return sample_patches(tiny_scenes, TINY_PATCH, 2, np.random.default_rng(2))
