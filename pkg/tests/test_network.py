import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jacshield import network as nw
from jacshield.trainer import OptimizerConfig, optimizer_step, _trainable
from helpers import LINEAR_W, linear, random_net, two_layer_relu


def test_identity_dense_forward():
    net = nw.linear_net(np.eye(2))
    np.testing.assert_array_equal(nw.forward(net, np.array([1.0, 2.0])).logits, [1.0, 2.0])


def test_dropout_keep_one_matches_eval():
    net = nw.init_network([nw.dense(3, 4), nw.relu(), nw.dropout(1.0), nw.dense(4, 2)], (3,), 0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    train = nw.forward(net, x, mode="train", step=3)
    np.testing.assert_array_equal(train.logits, nw.forward(net, x).logits)


def test_mnist_zero_image_gives_final_bias():
    net = nw.mnist_small(0, maps=(2, 2), hidden=8)
    net.layers[-1].bias = np.arange(10.0)
    out = nw.forward(net, np.zeros((28, 28, 1))).logits
    np.testing.assert_array_equal(out, np.arange(10.0))


def test_mnist_reference_shapes():
    net = nw.mnist_net(0)
    assert net.input_dim == 784 and net.output_dim == 10
    assert nw.tap_width(net, "L-1") == 1024
    assert nw.tap_width(net, "L-2") == 3136


def test_train_forward_deterministic_given_step():
    net = nw.init_network([nw.dense(3, 6), nw.relu(), nw.dropout(0.5), nw.dense(6, 2)], (3,), 4)
    x = np.ones((4, 3))
    a = nw.forward(net, x, "train", step=(1, 2, 3))
    b = nw.forward(net, x, "train", step=(1, 2, 3))
    c = nw.forward(net, x, "train", step=(1, 2, 4))
    assert np.array_equal(a.logits, b.logits)
    assert not np.array_equal(a.logits, c.logits)
    assert np.array_equal(nw.forward(net, x, "train", masks=a.masks).logits, a.logits)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        nw.forward(linear(), np.ones(3))
    with pytest.raises(ValueError):
        nw.Network([nw.dense(2, 3), nw.dense(4, 2)], (2,))


def test_final_layer_must_be_dense():
    with pytest.raises(ValueError, match="last"):
        nw.Network([nw.dense(2, 3), nw.relu()], (2,))


def test_keep_prob_only_for_dropout():
    with pytest.raises(ValueError):
        nw.Layer("relu", keep_prob=0.5)
    with pytest.raises(ValueError):
        nw.Layer("dropout")


# --- Jacobians ---------------------------------------------------------------

def test_linear_jacobian_equals_weights():
    jac = nw.jacobian(linear(), np.array([0.3, -2.0]))
    # rows are output units: d z_k / d x = W[:, k]
    np.testing.assert_array_equal(jac.rows, LINEAR_W.T)
    np.testing.assert_array_equal(jac.rows, LINEAR_W)  # symmetric example


def test_two_layer_linear_stack_l_minus_1():
    rng = np.random.default_rng(0)
    w1, w2 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    layers = [nw.dense(3, 4), nw.dense(4, 2)]
    layers[0].weight, layers[0].bias = w1, np.zeros(4)
    layers[1].weight, layers[1].bias = w2, np.zeros(2)
    net = nw.Network(layers, (3,))
    x = rng.normal(size=3)
    np.testing.assert_allclose(nw.jacobian(net, x, "L-1").rows, w1.T, atol=0)
    np.testing.assert_allclose(nw.jacobian(net, x, "L").rows, (w1 @ w2).T, atol=1e-14)


def test_relu_net_jacobian_matches_finite_differences():
    net = two_layer_relu(2)
    x = np.random.default_rng(1).normal(size=3)
    rows = nw.jacobian(net, x).rows
    h = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        fd = (nw.logits(net, x + e) - nw.logits(net, x - e)) / (2 * h)
        np.testing.assert_allclose(rows[:, d], fd, rtol=1e-4, atol=1e-9)


def test_conv_net_jacobian_matches_finite_differences():
    net = nw.mnist_small(1, maps=(2, 3), hidden=6)
    x = np.random.default_rng(2).random((28, 28, 1))
    rows = nw.jacobian(net, x).rows
    rng = np.random.default_rng(3)
    for d in rng.choice(784, 6, replace=False):
        e = np.zeros(784)
        e[d] = 1e-6
        e = e.reshape(28, 28, 1)
        fd = (nw.logits(net, x + e) - nw.logits(net, x - e)) / 2e-6
        np.testing.assert_allclose(rows[:, d], fd, rtol=1e-4, atol=1e-8)


def test_unknown_layer_rejected():
    with pytest.raises(ValueError):
        nw.jacobian(linear(), np.zeros(2), layer="L-3")
    with pytest.raises(ValueError):
        nw.jacobian(linear(), np.zeros(2), layer="L-2")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_frobenius_identity(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    jac = nw.jacobian(net, rng.normal(size=net.input_shape))
    direct = sum(float(v) ** 2 for v in jac.rows.ravel())
    assert jac.frobenius_sq == pytest.approx(jac.rows_norm_sq().sum(), rel=1e-12)
    assert jac.frobenius_sq == pytest.approx(direct, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_linear_jacobian_input_independent(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 3))
    net = nw.linear_net(w, rng.normal(size=3))
    a = nw.jacobian(net, rng.normal(size=4)).rows
    b = nw.jacobian(net, rng.normal(size=4)).rows
    assert np.array_equal(a, b)


def test_batch_jacobian_matches_single():
    net = two_layer_relu(3)
    x = np.random.default_rng(4).normal(size=(7, 3))
    batch = nw.jacobian_batch(net, x, batch_size=3)
    # BLAS rounding may depend on the batch shape
    for i in range(7):
        np.testing.assert_allclose(batch[i], nw.jacobian(net, x[i]).rows, rtol=1e-13, atol=1e-15)


# --- predict -----------------------------------------------------------------

def test_predict_argmax_and_ties():
    net = nw.linear_net(np.zeros((2, 2)), np.array([0.1, 0.9]))
    assert nw.predict(net, np.zeros(2)) == 1
    net = nw.linear_net(np.zeros((2, 2)), np.array([0.5, 0.5]))
    assert nw.predict(net, np.zeros(2)) == 0


def test_bias_only_net_predicts_argmax_bias():
    net = nw.linear_net(np.zeros((3, 4)), np.array([0.0, 2.0, -1.0, 1.0]))
    assert nw.predict(net, np.zeros(3)) == 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100))
def test_predict_invariant_to_logit_shift(seed, shift):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    x = rng.normal(size=(5,) + net.input_shape)
    shifted = net.copy()
    shifted.layers[-1].bias = shifted.layers[-1].bias + shift
    z = nw.logits(net, x)
    # a shift that reorders nearly tied logits through rounding is not a counterexample
    gaps = np.sort(z, axis=1)[:, -1] - np.sort(z, axis=1)[:, -2]
    ok = gaps > 1e-9 * (1 + abs(shift))
    assert np.array_equal(nw.predict(net, x)[ok], nw.predict(shifted, x)[ok])


# --- orthonormal last layer ---------------------------------------------------

def test_freeze_orthonormal():
    net = nw.freeze_orthonormal(two_layer_relu(0, hidden=6, k=3), 2, seed=5)
    w = net.layers[2].weight
    np.testing.assert_allclose(w.T @ w, np.eye(3), atol=1e-10)
    assert np.sum(w * w) == pytest.approx(3.0, abs=1e-10)
    assert net.layers[2].frozen and not net.layers[2].bias.any()
    assert nw.is_orthonormal(w)


def test_freeze_orthonormal_needs_tall_matrix():
    with pytest.raises(ValueError):
        nw.freeze_orthonormal(two_layer_relu(0, hidden=2, k=3), 2)


def test_optimizer_leaves_frozen_weights_bit_identical():
    net = nw.freeze_orthonormal(two_layer_relu(0, hidden=6, k=3), 2, seed=5)
    before = net.layers[2].weight.copy()
    params = _trainable(net)
    assert (2, "weight") not in params
    grads = {k: np.ones_like(v) for k, v in params.items()}
    optimizer_step(params, grads, {}, OptimizerConfig("sgd", rate=0.1))
    assert np.array_equal(net.layers[2].weight, before)
    assert not np.array_equal(net.layers[0].weight, two_layer_relu(0, hidden=6, k=3).layers[0].weight)


# --- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = nw.freeze_orthonormal(nw.mnist_small(3, maps=(2, 3), hidden=16), 9, 1)
    path = tmp_path / "m.jshd"
    nw.save_checkpoint(net, path)
    back = nw.load_checkpoint(path)
    assert back.signature() == net.signature()
    assert back.rng_seed == net.rng_seed
    for a, b in zip(net.layers, back.layers):
        assert a.frozen == b.frozen
        if a.has_params:
            assert a.weight.tobytes() == b.weight.tobytes()
            assert a.bias.tobytes() == b.bias.tobytes()
    assert nw.checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_header():
    data = nw.checkpoint_bytes(linear())
    assert data[:4] == b"JSHD"


def test_checkpoint_rejects_corruption():
    data = nw.checkpoint_bytes(linear())
    with pytest.raises(nw.CheckpointError, match="magic"):
        nw.network_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(nw.CheckpointError, match="truncated"):
        nw.network_from_bytes(data[:-3])
    with pytest.raises(nw.CheckpointError, match="trailing"):
        nw.network_from_bytes(data + b"\0")
