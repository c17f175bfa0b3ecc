import numpy as np
import pytest

from emocircuit import layers as L
from emocircuit.errors import NumericError, ShapeError, ValidationError
from emocircuit.gradcheck import finite_diff_check
from emocircuit.tensor import (
    Tape, Tensor, add, mul, numeric_warnings, tanh, tensor_from_bytes, tensor_to_bytes, tsum,
)

from oracles import naive_conv1d, naive_conv3d, naive_fc, naive_pool


# --- conv3d


def test_conv3d_zero_kernels_gives_relu_of_bias():
    x = np.random.default_rng(0).random((1, 4, 5, 5))
    y = L.conv3d_forward(x, np.zeros((2, 1, 2, 3, 3)), np.array([-1.0, 2.0])).data
    assert np.all(y[0] == 0.0)
    assert np.all(y[1] == 2.0)


def test_conv3d_identity_kernel():
    x = np.random.default_rng(1).random((1, 3, 4, 4))
    y = L.conv3d_forward(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1)).data
    np.testing.assert_array_equal(y, x)


def test_conv3d_matches_naive(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    k = rng.normal(size=(2, 2, 2, 3, 3))
    b = rng.normal(size=2)
    np.testing.assert_allclose(L.conv3d_forward(x, k, b).data, naive_conv3d(x, k, b), rtol=0, atol=1e-12)


def test_conv3d_strided_matches_naive(rng):
    x = rng.normal(size=(2, 5, 7, 6))
    k = rng.normal(size=(3, 2, 2, 3, 2))
    b = rng.normal(size=3)
    got = L.conv3d_forward(x, k, b, stride=(2, 2, 1)).data
    np.testing.assert_allclose(got, naive_conv3d(x, k, b, (2, 2, 1)), atol=1e-12)


def test_conv3d_shape_error_names_axis():
    with pytest.raises(ShapeError, match="axis H"):
        L.conv3d_forward(np.zeros((1, 3, 2, 5)), np.zeros((1, 1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError, match="channel"):
        L.conv3d_forward(np.zeros((2, 3, 5, 5)), np.zeros((1, 1, 1, 3, 3)), np.zeros(1))


# --- conv1d


def test_conv1d_constant_bias():
    y = L.conv1d_forward(np.zeros((3, 8)), np.ones((2, 3, 3)), np.full(2, 0.5)).data
    assert np.all(y == 0.5)


def test_conv1d_unit_kernel_copies_row(rng):
    x = rng.random((1, 10))
    np.testing.assert_array_equal(L.conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1)).data, x)


def test_conv1d_matches_naive(rng):
    x = rng.normal(size=(26, 35))
    k = rng.normal(size=(4, 26, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(L.conv1d_forward(x, k, b).data, naive_conv1d(x, k, b), atol=1e-12)


def test_conv1d_too_short():
    with pytest.raises(ShapeError):
        L.conv1d_forward(np.zeros((2, 2)), np.zeros((1, 2, 3)), np.zeros(1))


# --- shunting


def test_shunting_unit_denominator(rng):
    u = rng.random((2, 3))
    np.testing.assert_array_equal(L.shunting_forward(u, np.zeros((2, 3)), 1.0).data, u)


def test_shunting_arithmetic():
    assert L.shunting_forward(np.array([2.0]), np.array([1.0]), 1.0).data[0] == 1.0


def test_shunting_floor_preserves_sign_and_counts():
    before = numeric_warnings["shunting_floor"]
    y = L.shunting_forward(np.array([1.0, 1.0]), np.array([-1.0 + 1e-9, -1.0 - 1e-9]), 1.0).data
    assert y[0] == pytest.approx(1e6)
    assert y[1] == pytest.approx(-1e6)
    assert numeric_warnings["shunting_floor"] == before + 2


def test_shunting_layer_gradients(rng):
    x = Tensor(rng.random((2, 2, 4, 5, 5)))
    wu = Tensor(rng.normal(size=(3, 2, 2, 3, 3)) * 0.3)
    bu = Tensor(rng.normal(size=3) * 0.1 + 0.2)
    wi = Tensor(rng.normal(size=(3, 2, 2, 3, 3)) * 0.3)
    bi = Tensor(rng.normal(size=3) * 0.1 + 0.2)
    err = finite_diff_check(lambda: tsum(L.shunting_layer(x, wu, bu, wi, bi, 1.0)), [x, wu, bu, wi, bi])
    assert err < 1e-4


# --- fully connected


def test_fc_identity():
    x = np.arange(4.0)
    np.testing.assert_array_equal(L.fc_forward(x, np.eye(4), np.zeros(4), "linear").data, x)


def test_fc_zero_weights_relu():
    y = L.fc_forward(np.ones(3), np.zeros((2, 3)), np.array([-0.5, 0.7]), "relu").data
    np.testing.assert_array_equal(y, [0.0, 0.7])


def test_fc_matches_naive(rng):
    x, w, b = rng.normal(size=7), rng.normal(size=(5, 7)), rng.normal(size=5)
    np.testing.assert_allclose(L.fc_forward(x, w, b).data, naive_fc(x, w, b), atol=1e-12)


def test_fc_mismatch():
    with pytest.raises(ShapeError):
        L.fc_forward(np.ones(3), np.ones((2, 4)), np.zeros(2))


# --- sgd with L2


def test_sgd_plain_step():
    np.testing.assert_allclose(L.sgd_l2_step(np.array([1.0]), np.array([0.5]), 0.1, 0.0), [0.95])


def test_sgd_pure_decay():
    w = L.sgd_l2_step(np.array([2.0, -2.0]), np.zeros(2), 0.1, 0.5)
    np.testing.assert_allclose(w, [1.8, -1.8])


def test_sgd_quadratic_closed_form():
    # E(w) = (w - 3)^2 / 2, so dE/dw = w - 3; closed form of one step
    w0, eta, lam = 1.25, 0.2, 0.01
    expected = w0 - eta * (w0 - 3.0) - eta * 2 * lam * w0
    got = L.sgd_l2_step(np.array([w0]), np.array([w0 - 3.0]), eta, lam)[0]
    assert abs(got - expected) < 1e-12


def test_sgd_refuses_nan():
    with pytest.raises(NumericError):
        L.sgd_l2_step(np.ones(2), np.array([1.0, np.nan]), 0.1, 0.0)


def test_sgd_updates_tensor_in_place():
    t = Tensor(np.ones(2))
    L.sgd_l2_step(t, np.ones(2), 0.5, 0.0)
    np.testing.assert_array_equal(t.data, [0.5, 0.5])


# --- pooling


def test_pool_constant():
    y = L.pool_max(np.full((2, 6, 6), 3.0), 2, 2, dims=2).data
    assert y.shape == (2, 3, 3) and np.all(y == 3.0)


def test_pool_increasing_sequence():
    y = L.pool_max(np.arange(10.0), 2, 2, dims=1).data
    np.testing.assert_array_equal(y, np.arange(1.0, 10.0, 2))


@pytest.mark.parametrize("dims,window,stride", [(1, (3,), (2,)), (2, (2, 3), (2, 1)), (3, (2, 2, 2), (2, 2, 2))])
def test_pool_matches_naive(rng, dims, window, stride):
    x = rng.normal(size=(2, 3, 7, 6, 5)[: 2 + dims])
    np.testing.assert_array_equal(L.pool_max(x, window, stride, dims).data, naive_pool(x, window, stride))


def test_pool_tie_routes_to_first_index():
    x = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]]), requires_grad=True)
    with Tape() as tape:
        y = tsum(L.pool_max(x, 2, 2, dims=1))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 1.0, 0.0]])


def test_pool_window_too_big():
    with pytest.raises(ShapeError):
        L.pool_max(np.zeros((2, 3)), 4, dims=1)


def test_pool_gradients(rng):
    x = Tensor(rng.normal(size=(2, 2, 5, 6)))
    assert finite_diff_check(lambda: tsum(mul(L.pool_max(x, 2, 2, dims=2), 1.5)), [x]) < 1e-4


# --- batch norm


def test_batchnorm_standardized_passthrough(rng):
    x = rng.normal(size=(16, 3, 4))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    y = L.batchnorm_forward(x, np.ones(3), np.zeros(3), "train").data
    # the only deviation left is the 1/sqrt(1 + eps) factor
    np.testing.assert_allclose(y, x, rtol=L.BN_EPS / 2 + 1e-9, atol=1e-12)
    np.testing.assert_allclose(L.batchnorm_forward(x, np.ones(3), np.zeros(3), "train", eps=0.0).data, x, atol=1e-6)


def test_batchnorm_constant_beta(rng):
    y = L.batchnorm_forward(rng.normal(size=(4, 2, 3)), np.zeros(2), np.full(2, 0.3), "train").data
    np.testing.assert_array_equal(y, 0.3)


def test_batchnorm_zero_variance_is_finite():
    y = L.batchnorm_forward(np.ones((4, 2, 3)), np.ones(2), np.zeros(2), "train").data
    assert np.all(np.isfinite(y))


def test_batchnorm_running_stats_used_in_infer(rng):
    stats = L.RunningStats(2)
    x = rng.normal(loc=3.0, size=(8, 2, 5))
    L.batchnorm_forward(x, np.ones(2), np.zeros(2), "train", stats)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2)))
    y = L.batchnorm_forward(x[:1], np.ones(2), np.zeros(2), "infer", stats).data
    expected = (x[:1] - stats.mean[None, :, None]) / np.sqrt(stats.var[None, :, None] + 1e-5)
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_batchnorm_needs_batch():
    with pytest.raises(ShapeError):
        L.batchnorm_forward(np.ones((1, 2, 3)), np.ones(2), np.zeros(2), "train")


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_gradients(rng, mode):
    x = Tensor(rng.normal(size=(3, 2, 4)))
    g = Tensor(rng.normal(size=2))
    b = Tensor(rng.normal(size=2))
    w = rng.normal(size=(3, 2, 4))
    stats = L.RunningStats(2)
    stats.mean, stats.var = rng.normal(size=2), rng.random(2) + 0.5

    def f():
        return tsum(mul(L.batchnorm_forward(x, g, b, mode, None if mode == "train" else stats), w))

    assert finite_diff_check(f, [x, g, b]) < 1e-4


# --- dropout


def test_dropout_identity_cases(rng):
    x = rng.normal(size=50)
    np.testing.assert_array_equal(L.dropout(x, 0.0, seed=1).data, x)
    np.testing.assert_array_equal(L.dropout(x, 0.7, seed=1, mode="infer").data, x)


def test_dropout_survivor_fraction_and_scale():
    y = L.dropout(np.ones(100_000), 0.5, seed=3).data
    frac = np.mean(y > 0)
    assert abs(frac - 0.5) <= 0.01
    assert set(np.unique(y)) == {0.0, 2.0}


def test_dropout_deterministic():
    a = L.dropout(np.ones(1000), 0.3, seed=9).data
    b = L.dropout(np.ones(1000), 0.3, seed=9).data
    np.testing.assert_array_equal(a, b)


# --- losses


def test_xent_confident_correct_is_near_zero():
    loss = L.softmax_crossentropy(np.array([[20.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])).data
    assert loss < 1e-8


def test_xent_rejects_unnormalized():
    with pytest.raises(ValidationError):
        L.softmax_crossentropy(np.zeros((1, 3)), np.array([[0.5, 0.1, 0.1]]))


def test_mse_self_is_zero(rng):
    x = rng.normal(size=(4, 2))
    assert L.mse(x, x).data == 0.0


def test_loss_gradients(rng):
    logits = Tensor(rng.normal(size=(3, 7)))
    target = rng.dirichlet(np.ones(7), size=3)
    assert finite_diff_check(lambda: L.softmax_crossentropy(logits, target), [logits]) < 1e-4
    pred = Tensor(rng.normal(size=(5, 2)))
    ref = rng.normal(size=(5, 2))
    assert finite_diff_check(lambda: L.mse(tanh(pred), ref), [pred]) < 1e-4


# --- gradient checks of the raw ops


def test_conv_gradients_strided_padded(rng):
    x = Tensor(rng.normal(size=(2, 2, 4, 6, 5)))
    k = Tensor(rng.normal(size=(3, 2, 2, 3, 2)))
    b = Tensor(rng.normal(size=3))
    w = rng.normal(size=(2, 3, 3, 3, 4))
    f = lambda: tsum(mul(L.conv(x, k, b, stride=(1, 2, 1), padding=(0, 1, 0)), w))  # noqa: E731
    assert finite_diff_check(f, [x, k, b]) < 1e-4


def test_conv1d_gradients(rng):
    x = Tensor(rng.normal(size=(2, 5, 9)))
    k = Tensor(rng.normal(size=(4, 5, 3)))
    b = Tensor(rng.normal(size=4))
    w = rng.normal(size=(2, 4, 7))
    assert finite_diff_check(lambda: tsum(mul(L.conv1d_forward(x, k, b), w)), [x, k, b]) < 1e-4


def test_fc_gradients(rng):
    x = Tensor(rng.normal(size=(3, 6)))
    w = Tensor(rng.normal(size=(4, 6)))
    b = Tensor(rng.normal(size=4))
    ref = rng.normal(size=(3, 4))
    for act in ("relu", "tanh", "linear", "sigmoid"):
        assert finite_diff_check(lambda: L.mse(L.fc_forward(x, w, b, act), ref), [x, w, b]) < 1e-4


def test_finite_diff_on_linear_function(rng):
    x = Tensor(rng.normal(size=5))
    c = rng.normal(size=5)
    assert finite_diff_check(lambda: tsum(mul(x, c)), [x]) < 1e-9


def test_composed_stack_gradient(rng):
    x = Tensor(rng.random((2, 1, 3, 6, 6)))
    k = Tensor(rng.normal(size=(2, 1, 2, 3, 3)) * 0.5)
    b = Tensor(np.full(2, 0.1))
    wi = Tensor(rng.normal(size=(2, 2, 1, 2, 2)) * 0.5)
    bi = Tensor(np.full(2, 0.1))
    wu = Tensor(rng.normal(size=(2, 2, 1, 2, 2)) * 0.5)
    bu = Tensor(np.full(2, 0.2))
    fw = Tensor(rng.normal(size=(3, 2 * 2 * 3 * 3)) * 0.3)
    fb = Tensor(np.zeros(3))
    ref = rng.normal(size=(2, 3))

    def f():
        h = L.conv3d_forward(x, k, b)
        s = L.shunting_layer(h, wu, bu, wi, bi)
        from emocircuit.tensor import flatten
        return L.mse(L.fc_forward(flatten(s), fw, fb, "tanh"), ref)

    assert finite_diff_check(f, [x, k, b, wu, bu, wi, bi, fw, fb]) < 1e-4


# --- tape mechanics


def test_tape_replays_in_reverse_and_zeroes():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = tsum(mul(add(a, a), a))
    assert tape.backward(y) == ["sum", "mul", "add"]
    first = a.grad.copy()
    tape.backward(y)
    np.testing.assert_array_equal(a.grad, first)


def test_no_tape_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    y = mul(a, a)
    assert not y.requires_grad


def test_forward_purity(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    k = rng.normal(size=(2, 2, 2, 3, 3))
    b = rng.normal(size=2)
    assert L.conv3d_forward(x, k, b).data.tobytes() == L.conv3d_forward(x, k, b).data.tobytes()


def test_tensor_bytes_roundtrip(rng):
    x = rng.normal(size=(2, 3, 4))
    blob = tensor_to_bytes(x)
    assert blob[:4] == (3).to_bytes(4, "little")
    np.testing.assert_array_equal(tensor_from_bytes(blob), x)
    with pytest.raises(ShapeError):
        tensor_from_bytes(blob[:-8])
