import numpy as np
import pytest

from ig_crowd.regressor import count_loss, l2_loss
from ig_crowd.schemas.core import LossConfig, OptimConfig
from ig_crowd.tensor import (
    ArchiveError,
    ParamSet,
    ShapeError,
    Tensor,
    TensorError,
    backward,
    conv2d,
    crop,
    decode_tensor,
    encode_tensor,
    fully_connected,
    global_avg_pool,
    load_tensor,
    maxpool2,
    no_grad,
    relu,
    save_tensor,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)
from ig_crowd.tensor.gradcheck import max_relative_error

TOL = 1e-4


def _away_from_zero(x):
    return np.where(np.abs(x) < 0.05, 0.1, x)


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def test_conv2d_gradients():
    rng = np.random.default_rng(1)
    for _ in range(20):
        c, o, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
        x, w, b = _leaf(rng, 2, c, 6, 5), _leaf(rng, o, c, k, k), _leaf(rng, o)
        proj = Tensor(rng.normal(size=(2, o, 6, 5)))
        err = max_relative_error(lambda: (conv2d(x, w, b) * proj).sum(), [x, w, b])
        assert err < TOL


def test_relu_and_maxpool_gradients():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = Tensor(_away_from_zero(rng.normal(size=(2, 3, 6, 6))), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 3, 3, 3)))
        err = max_relative_error(lambda: (maxpool2(relu(x)) * proj).sum(), [x])
        assert err < TOL


def test_fully_connected_softmax_and_pool_gradients():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, w, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 3, 5), _leaf(rng, 5)
        proj = Tensor(rng.normal(size=(2, 5)))
        err = max_relative_error(lambda: (softmax(fully_connected(global_avg_pool(x), w, b)) * proj).sum(), [x, w, b])
        assert err < TOL


def test_cross_entropy_gradients():
    rng = np.random.default_rng(4)
    for _ in range(20):
        logits = _leaf(rng, 6, 4, scale=2.0)
        labels = rng.integers(0, 4, size=6)
        weights = rng.uniform(0.5, 2.0, size=6)
        err = max_relative_error(lambda: softmax_cross_entropy(logits, labels, weights), [logits])
        assert err < TOL


def test_density_losses_gradients():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred = _leaf(rng, 3, 1, 2, 2)
        gt = rng.uniform(0, 1, size=(3, 1, 2, 2))
        assert max_relative_error(lambda: l2_loss(pred, gt), [pred]) < TOL
        cfg = LossConfig(lambda_=float(rng.uniform(1e-3, 1.0)))
        assert max_relative_error(lambda: count_loss(pred, gt, cfg), [pred]) < TOL


def test_stacked_network_gradients():
    rng = np.random.default_rng(6)
    for _ in range(5):
        x = Tensor(rng.uniform(size=(2, 1, 8, 8)))
        w1, b1 = _leaf(rng, 3, 1, 3, 3), _leaf(rng, 3)
        w2, b2 = _leaf(rng, 1, 3, 3, 3), _leaf(rng, 1)

        def fn():
            h = maxpool2(relu(conv2d(x, w1, b1)))
            return l2_loss(conv2d(h, w2, b2), np.zeros((2, 1, 4, 4)))

        assert max_relative_error(fn, [w1, b1, w2, b2], max_coords=10, rng=rng) < TOL


def test_loss_values():
    pred = Tensor(np.array([[[[1.0, 2.0]]], [[[0.0, 3.0]]]]))
    gt = np.array([[[[0.0, 2.0]]], [[[1.0, 1.0]]]])
    # squared residuals 1 + 0 + 1 + 4 over 2N = 4
    assert l2_loss(pred, gt).item() == pytest.approx(1.5)
    # counts 3, 3 vs 2, 2 -> lambda / 4 * 2
    assert count_loss(pred, gt, LossConfig(lambda_=0.5)).item() == pytest.approx(0.25)
    assert count_loss(pred, np.array([3.0, 1.0]), LossConfig(lambda_=1.0)).item() == pytest.approx(1.0)


def test_shape_errors_name_dims():
    with pytest.raises(ShapeError, match=r"\[1, 2, 4, 4\]"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        l2_loss(Tensor(np.zeros((2, 1, 2, 2))), np.zeros((2, 1, 2, 3)))
    with pytest.raises(ShapeError):
        crop(Tensor(np.zeros((1, 1, 4, 4))), 2, 2, 3, 3)
    with pytest.raises(ShapeError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(TensorError):
        backward(Tensor(np.zeros(3), requires_grad=True))


def test_no_grad_records_nothing():
    w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    with no_grad():
        out = conv2d(Tensor(np.ones((1, 1, 4, 4))), w)
    assert not out.requires_grad
    assert relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0.0, 0.0, 2.0]


def test_sgd_momentum_update():
    params = ParamSet()
    p = params.add("w", np.array([1.0, -2.0]))
    cfg = OptimConfig(learning_rate=0.1, momentum=0.5)
    p.grad = np.array([1.0, 1.0])
    sgd_step(params, cfg)
    assert np.allclose(p.data, [0.9, -2.1])
    assert p.grad is None
    p = params["w"]
    p.grad = np.array([1.0, 0.0])
    sgd_step(params, cfg)
    # v = 0.5 * [1, 1] + [1, 0] = [1.5, 0.5]
    assert np.allclose(params["w"].data, [0.75, -2.15])
    assert np.allclose(params.entry("w").velocity, [1.5, 0.5])


def test_paramset_copy_is_independent(tmp_path):
    params = ParamSet()
    params.add("a", np.arange(6.0).reshape(2, 3))
    params.add("b", np.zeros(2))
    clone = params.copy()
    assert clone.bitwise_equal(params)
    clone["a"].data[0, 0] = 99.0
    assert params["a"].data[0, 0] == 0.0
    assert not clone.bitwise_equal(params)
    files = params.save(tmp_path / "p")
    assert sorted(files) == ["a.tge", "b.tge"]
    loaded = ParamSet.load(tmp_path / "p", params.names())
    assert loaded.bitwise_equal(params)
    assert params.n_values() == 8
    with pytest.raises(ShapeError):
        params.load_state_dict({"b": np.zeros(3)})


def test_tensor_archive_layout(tmp_path):
    arr = np.arange(6.0).reshape(2, 3)
    blob = encode_tensor(arr)
    assert blob[:4] == b"TGE1"
    assert blob[4] == 1 and blob[5] == 2
    assert int.from_bytes(blob[6:10], "little") == 2 and int.from_bytes(blob[10:14], "little") == 3
    assert len(blob) == 14 + 6 * 8
    assert np.array_equal(decode_tensor(blob), arr)
    save_tensor(tmp_path / "x.tge", arr)
    assert load_tensor(tmp_path / "x.tge").tobytes() == arr.tobytes()


def test_tensor_archive_rejects_bad_input(tmp_path):
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(ArchiveError, match="magic"):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(ArchiveError):
        decode_tensor(blob[:-3])
    with pytest.raises(ArchiveError):
        encode_tensor(np.zeros((0, 3)))
    with pytest.raises(ArchiveError):
        load_tensor(tmp_path / "missing.tge")
