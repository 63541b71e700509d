import numpy as np
import pandas as pd
import pytest

from ig_crowd.adapters.folder_adapter import FolderAdapterError, load_folder
from ig_crowd.density import sample_patches
from ig_crowd.metrics import pooled_separation
from ig_crowd.schemas.config import DataConfig
from ig_crowd.schemas.core import PatchSpec
from ig_crowd.synth import SynthError, generate_dataset, load_dataset, save_dataset, split
from ig_crowd.tensor import save_tensor

from conftest import TINY_REGIMES


def test_generate_is_deterministic(tiny_scenes):
    again = generate_dataset(TINY_REGIMES, 6, (32, 32), seed=3, sigma=1.0, region_shape=(32, 32), threads=2)
    assert [s.scene_id for s in again] == [s.scene_id for s in tiny_scenes]
    for a, b in zip(again, tiny_scenes):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.points, b.points)


def test_generate_respects_regimes(tiny_scenes):
    assert len(tiny_scenes) == 12
    assert tiny_scenes[0].scene_id == "sparse-0000"
    for s in tiny_scenes:
        regime = next(r for r in TINY_REGIMES if r.name == s.regime_label)
        lo, hi = regime.count_range
        assert lo <= s.count <= hi
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.density.sum() == pytest.approx(s.count, abs=1e-6)


def test_count_range_scales_with_area():
    scenes = generate_dataset(TINY_REGIMES[1:], 3, (64, 64), seed=1, sigma=1.0, region_shape=(32, 32))
    assert all(80 <= s.count <= 160 for s in scenes)


def test_generate_rejects_duplicate_regimes():
    with pytest.raises(SynthError):
        generate_dataset([TINY_REGIMES[0], TINY_REGIMES[0]], 2, (32, 32), seed=0)


def test_split_is_stratified_and_disjoint(tiny_scenes):
    train, val, test = split(tiny_scenes, (0.5, 0.25, 0.25), seed=9)
    ids = [s.scene_id for s in train + val + test]
    assert len(ids) == len(set(ids)) == len(tiny_scenes)
    for part in (train, val, test):
        labels = {s.regime_label for s in part}
        assert labels == {"sparse", "dense"}
    again = split(tiny_scenes, (0.5, 0.25, 0.25), seed=9)
    assert [s.scene_id for s in again[0]] == [s.scene_id for s in train]


def test_split_rejects_bad_fractions(tiny_scenes):
    with pytest.raises(SynthError):
        split(tiny_scenes, (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(SynthError, match="val split is empty"):
        split(tiny_scenes[:2], (0.9, 0.05, 0.05), seed=0)


def test_dataset_round_trip(tmp_path, tiny_scenes):
    files = save_dataset(tiny_scenes, tmp_path / "data", {"sigma": 1.0, "splits": {"train": ["dense-0001"]}})
    assert "dataset.json" in files
    bundle = load_dataset(tmp_path / "data")
    assert [s.scene_id for s in bundle.scenes] == [s.scene_id for s in tiny_scenes]
    for a, b in zip(bundle.scenes, tiny_scenes):
        assert np.array_equal(a.image, b.image)
        assert np.allclose(a.points, b.points, atol=1e-9)
        assert np.allclose(a.density, b.density)
    assert [s.scene_id for s in bundle.subset("train")] == ["dense-0001"]
    with pytest.raises(SynthError):
        load_dataset(tmp_path / "nowhere")


def test_folder_adapter_crops_to_grid(tmp_path):
    image = np.full((18, 21), 0.5)
    save_tensor(tmp_path / "a.tge", image)
    pd.DataFrame([[1.0, 1.0], [20.5, 3.0], [5.0, 17.0]], columns=["x", "y"]).to_csv(tmp_path / "a.csv", index=False)
    scenes = load_folder(tmp_path, sigma=1.0)
    assert len(scenes) == 1
    scene = scenes[0]
    assert scene.image.shape == (16, 20)
    assert scene.count == 1
    assert scene.regime_label == "unknown"


def test_folder_adapter_errors(tmp_path):
    with pytest.raises(FolderAdapterError):
        load_folder(tmp_path)
    save_tensor(tmp_path / "b.tge", np.zeros((8, 8)))
    with pytest.raises(FolderAdapterError, match="missing annotations"):
        load_folder(tmp_path)


@pytest.fixture(scope="module")
def default_bank():
    cfg = DataConfig()
    scenes = generate_dataset(cfg.regimes, 12, cfg.image_shape, seed=0, sigma=cfg.sigma, region_shape=cfg.region_shape)
    bank = sample_patches(scenes, PatchSpec(), 8, np.random.default_rng(0))
    regimes = np.asarray(bank.regimes)
    return bank.counts[regimes == "sparse"], bank.counts[regimes == "dense"]


def test_default_regimes_differ_in_patch_counts(default_bank):
    sparse, dense = default_bank
    assert sparse.size == dense.size == 96
    assert dense.mean() >= 5 * sparse.mean()


def test_default_regimes_are_separable_at_depth_zero(default_bank):
    sparse, dense = default_bank
    assert pooled_separation(sparse, dense) >= 3.0
