import numpy as np
import pytest

from ig_crowd.classifier import (
    ClassifierError,
    ClassifierNet,
    ClassifierRouter,
    ConstantRouter,
    LabeledRoi,
    OracleRouter,
    balance,
    classify,
    error_matrix,
    labels_from_errors,
    load_classifier,
    make_labels,
    route_and_count,
    routed_roi_maps,
    save_classifier,
    train_classifier,
)
from ig_crowd.density import grid_patches, stitch_predictions
from ig_crowd.regressor import roi_maps
from ig_crowd.schemas.core import ClassifierConfig, OptimConfig

from conftest import TINY_CLASSIFIER


def _roi(value, rng):
    return np.clip(value + rng.uniform(-0.1, 0.1, size=(1, 8, 8)), 0.0, 1.0)


def _two_tone(n, rng):
    dark = [LabeledRoi(f"d{i}", _roi(0.1, rng), "0") for i in range(n)]
    bright = [LabeledRoi(f"b{i}", _roi(0.8, rng), "1") for i in range(n)]
    return dark + bright


def test_labels_ties_go_to_smallest_address():
    errs = np.array([[1.0, 1.0], [2.0, 0.5], [0.0, 3.0]])
    assert labels_from_errors(errs, ["1", "0"]) == ["0", "0", "1"]
    assert labels_from_errors(errs, ["0", "1"]) == ["0", "1", "0"]


def test_balance_oversamples_minorities():
    rng = np.random.default_rng(0)
    samples = [LabeledRoi(f"p{i}", _roi(0.5, rng), lab) for i, lab in enumerate(["a", "a", "a", "b", "c", "c"])]
    result = balance(samples, ["a", "b", "c", "d"])
    assert result.classes == ["a", "b", "c"]
    assert result.unreachable == ["d"]
    assert len(result.samples) == len(samples)
    assert result.class_totals() == {"a": 3.0, "b": 3.0, "c": 3.0}
    assert len(result.expanded_indices()) == 9
    assert [s.patch_id for s in result.samples] == [s.patch_id for s in samples]


def test_balance_single_class():
    rng = np.random.default_rng(0)
    result = balance([LabeledRoi("p", _roi(0.5, rng), "0")], ["0", "1"])
    assert result.classes == ["0"] and result.unreachable == ["1"]
    with pytest.raises(ClassifierError, match="2 reachable"):
        train_classifier(result, [], TINY_CLASSIFIER, np.random.default_rng(0))


def test_classifier_shapes():
    net = ClassifierNet.init(TINY_CLASSIFIER, 3, np.random.default_rng(0))
    probs = classify(net, np.random.default_rng(1).uniform(size=(5, 1, 8, 8)), threads=2)
    assert probs.shape == (5, 3)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert net.architecture == "conv5x5x4-pool2-conv3x3x4-pool2-conv3x3x4-gap-fc8-fc3"
    with pytest.raises(ClassifierError):
        ClassifierNet.init(TINY_CLASSIFIER, 0, np.random.default_rng(0))


def test_classifier_learns_separable_rois(tmp_path):
    rng = np.random.default_rng(3)
    train = balance(_two_tone(20, rng))
    val = _two_tone(10, rng)
    cfg = ClassifierConfig(optim=OptimConfig(learning_rate=0.05), widths=(8, 8, 8), hidden=16, batch_size=8, max_epochs=40, patience=40)
    result = train_classifier(train, val, cfg, np.random.default_rng(4))
    assert result.accuracy >= 90.0
    assert result.classes == ["0", "1"]
    assert result.accuracy == result.curve["val_accuracy"].max()
    assert set(result.per_class_accuracy) == {"0", "1"}

    files = save_classifier(result, tmp_path / "clf", seed=1)
    assert "manifest.json" in files
    loaded = load_classifier(tmp_path / "clf")
    assert loaded.classes == result.classes
    assert loaded.net.params.bitwise_equal(result.net.params)
    rois = np.stack([s.roi for s in val])
    assert np.array_equal(classify(loaded.net, rois), classify(result.net, rois))


def test_load_classifier_missing(tmp_path):
    with pytest.raises(ClassifierError):
        load_classifier(tmp_path / "nothing")


def _pair(tiny_net):
    # the second expert predicts a constant extra density everywhere
    louder = tiny_net.copy()
    louder.params["conv5.b"].data[:] = louder.params["conv5.b"].data + 0.5
    return {"0": tiny_net, "1": louder}


def test_make_labels_match_error_argmin(tiny_net, bank):
    experts = _pair(tiny_net)
    addresses, errs = error_matrix(experts, bank)
    assert addresses == ["0", "1"]
    labeled = make_labels(experts, bank)
    assert [l.label for l in labeled] == ["0" if e0 <= e1 else "1" for e0, e1 in errs]
    assert labeled[0].roi.shape == (1, 8, 8)
    assert OracleRouter().route(bank, experts) == [l.label for l in labeled]


def test_routed_maps_follow_router(tiny_net, bank):
    experts = _pair(tiny_net)
    chosen, maps = routed_roi_maps(ConstantRouter("1"), experts, bank)
    assert chosen == ["1"] * len(bank)
    assert np.allclose(maps, roi_maps(experts["1"], bank))
    with pytest.raises(ClassifierError, match="unknown expert"):
        routed_roi_maps(ConstantRouter("7"), experts, bank)


def test_route_and_count_matches_stitched_prediction(tiny_net, tiny_scenes, spec):
    scene = tiny_scenes[-1]
    stitched, count = route_and_count(ConstantRouter("0"), {"0": tiny_net}, scene.image, spec, density=scene.density)
    bank = grid_patches(scene, spec)
    maps = roi_maps(tiny_net, bank)
    expected = stitch_predictions([(maps[i], (t // 4, l // 4)) for i, (t, l) in enumerate(bank.placements)], (8, 8))
    assert np.allclose(stitched.values, expected.values)
    assert count == pytest.approx(expected.count)
    with pytest.raises(ClassifierError):
        route_and_count(ConstantRouter("0"), {}, scene.image, spec)


def test_classifier_router_returns_known_classes(tiny_net, bank):
    net = ClassifierNet.init(TINY_CLASSIFIER, 2, np.random.default_rng(0))
    router = ClassifierRouter(net, ["0", "1"])
    chosen = router.route(bank, _pair(tiny_net))
    assert len(chosen) == len(bank)
    assert set(chosen) <= {"0", "1"}


def _random_labels(n, k, rng):
    labels = rng.permutation(np.arange(n) % k)
    return [LabeledRoi(f"r{i}", rng.uniform(size=(1, 8, 8)), str(lab)) for i, lab in enumerate(labels)]


@pytest.mark.parametrize("k", [2, 4])
def test_random_labels_stay_at_chance(k):
    rng = np.random.default_rng(10 + k)
    train = balance(_random_labels(16 * k, k, rng), [str(c) for c in range(k)])
    val = _random_labels(400, k, rng)
    result = train_classifier(train, val, TINY_CLASSIFIER, np.random.default_rng(k))
    assert result.classes == [str(c) for c in range(k)]
    assert abs(result.accuracy - 100.0 / k) <= 10.0


def test_same_seed_reproduces_training():
    rng = np.random.default_rng(5)
    train = balance(_two_tone(12, rng))
    val = _two_tone(6, rng)
    a = train_classifier(train, val, TINY_CLASSIFIER, np.random.default_rng(8))
    b = train_classifier(train, val, TINY_CLASSIFIER, np.random.default_rng(8), threads=2)
    assert a.accuracy == b.accuracy
    assert a.per_class_accuracy == b.per_class_accuracy
    assert a.net.params.bitwise_equal(b.net.params)
    assert a.curve.equals(b.curve)
