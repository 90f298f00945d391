import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from jacshield import network as nw
from jacshield import trainer as tr
from jacshield.attacks import AttackConfig
from jacshield.data_io import synth_gaussians
from jacshield.regularizers import LossConfig
from jacshield.robustness import avg_jacobian_frobenius


@pytest.fixture(scope="module")
def blobs():
    return synth_gaussians(2, 2, 100, spread=0.05, seed=0)


def weights(net):
    return [(l.weight.copy(), l.bias.copy()) for l in net.layers if l.has_params]


def same_weights(a, b):
    return all(np.array_equal(wa, wb) and np.array_equal(ba, bb)
               for (wa, ba), (wb, bb) in zip(weights(a), weights(b)))


def cfg(**kw):
    base = dict(optimizer=tr.OptimizerConfig(rate=1e-2), batch_size=20, epochs_phase1=3,
                epochs_phase2=3, seed=1)
    base.update(kw)
    return tr.TrainConfig(**base)


# --- optimizers --------------------------------------------------------------

def test_adam_first_step():
    p = {"w": np.array([0.5])}
    tr.optimizer_step(p, {"w": np.array([1.0])}, {}, tr.OptimizerConfig(rate=1e-3))
    assert p["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_zero_gradient_leaves_params():
    for kind in tr.OPTIMIZERS:
        p = {"w": np.array([0.5, -1.0])}
        state = {}
        tr.optimizer_step(p, {"w": np.zeros(2)}, state, tr.OptimizerConfig(kind))
        assert np.array_equal(p["w"], [0.5, -1.0])
        assert state["t"] == 1


def test_adam_moments_decay_under_zero_gradient():
    p = {"w": np.array([0.0])}
    state = {}
    c = tr.OptimizerConfig()
    tr.optimizer_step(p, {"w": np.array([2.0])}, state, c)
    m = state[("m", "w")].copy()
    tr.optimizer_step(p, {"w": np.array([0.0])}, state, c)
    assert state[("m", "w")][0] == pytest.approx(0.9 * m[0])


def test_sgd_exact():
    p = {"w": np.array([1.0, 2.0])}
    tr.optimizer_step(p, {"w": np.array([0.5, -0.25])}, {}, tr.OptimizerConfig("sgd", rate=0.1))
    assert np.array_equal(p["w"], np.array([1.0, 2.0]) - 0.1 * np.array([0.5, -0.25]))


def test_rmsprop_first_step():
    p = {"w": np.array([0.0])}
    tr.optimizer_step(p, {"w": np.array([2.0])}, {}, tr.OptimizerConfig("rmsprop", rate=1e-3,
                                                                         eps=0.0))
    # v = 0.1 * 4, step = rate * 2 / sqrt(0.4)
    assert p["w"][0] == pytest.approx(-1e-3 * 2 / np.sqrt(0.4), rel=1e-14)


def test_non_finite_gradient_aborts():
    p = {"w": np.array([0.0])}
    with pytest.raises(tr.DivergenceError):
        tr.optimizer_step(p, {"w": np.array([np.nan])}, {}, tr.OptimizerConfig())
    assert p["w"][0] == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        tr.OptimizerConfig("lbfgs")
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(adv_fraction=0.5)
    with pytest.raises(ValueError):
        tr.TrainConfig(adv_fraction=1.5, adv_attack=AttackConfig("fgsm"))


# --- adversarial mixing --------------------------------------------------------

def test_mix_fraction_zero_is_identity():
    x = np.random.default_rng(0).random((10, 2))
    out, idx = tr.mix_adversarial(x, np.zeros(10, int), nw.tiny_mlp(2, 2), AttackConfig("fgsm"),
                                  0.0, 1)
    assert np.array_equal(out, x) and len(idx) == 0


def test_mix_replaces_exact_count():
    x = np.random.default_rng(0).random((500, 2))
    y = np.zeros(500, dtype=int)
    out, idx = tr.mix_adversarial(x, y, nw.tiny_mlp(2, 2), AttackConfig("fgsm", epsilon=0.1),
                                  0.5, (1, 2))
    assert len(idx) == 250 == len(np.unique(idx))
    untouched = np.setdiff1d(np.arange(500), idx)
    assert np.array_equal(out[untouched], x[untouched])
    again, idx2 = tr.mix_adversarial(x, y, nw.tiny_mlp(2, 2), AttackConfig("fgsm", epsilon=0.1),
                                     0.5, (1, 2))
    assert np.array_equal(idx, idx2) and np.array_equal(out, again)


def test_mix_rejects_bad_fraction():
    with pytest.raises(ValueError):
        tr.mix_adversarial(np.zeros((2, 2)), [0, 0], nw.tiny_mlp(2, 2), AttackConfig(), 2.0, 0)


# --- phases --------------------------------------------------------------------

def test_zero_epochs_is_noop(blobs):
    net = nw.tiny_mlp(2, 2, seed=0)
    out, hist = tr.train_phase(net, blobs, blobs, cfg(epochs_phase1=0))
    assert same_weights(net, out) and len(hist) == 0


def test_tiny_mlp_learns_gaussians(blobs):
    oracle = LogisticRegression().fit(blobs.x, blobs.y).score(blobs.x, blobs.y)
    assert oracle >= 0.95
    net, hist = tr.train_phase(nw.tiny_mlp(2, 2, seed=0), blobs, blobs, cfg(epochs_phase1=30))
    assert len(hist) == 30
    assert {r.phase for r in hist.records} == {1}
    assert np.mean(nw.predict(net, blobs.x) == blobs.y) >= 0.95


def test_training_is_deterministic(blobs):
    c = cfg(loss=LossConfig(0.1, "jacobian"))
    a = tr.train(nw.tiny_mlp(2, 2, seed=0), blobs, blobs, c)[1]
    b = tr.train(nw.tiny_mlp(2, 2, seed=0), blobs, blobs, c)[1]
    assert same_weights(a, b)
    assert nw.checkpoint_bytes(a) == nw.checkpoint_bytes(b)


def test_seed_changes_result(blobs):
    a = tr.train_phase(nw.tiny_mlp(2, 2, seed=0), blobs, None, cfg(seed=1))[0]
    b = tr.train_phase(nw.tiny_mlp(2, 2, seed=0), blobs, None, cfg(seed=2))[0]
    assert not same_weights(a, b)


def test_zero_lambda_post_process_is_plain_training(blobs):
    net = nw.tiny_mlp(2, 2, seed=0)
    a = tr.post_process(net, blobs, cfg(loss=LossConfig(0.0, "jacobian")))[0]
    b = tr.post_process(net, blobs, cfg(loss=LossConfig()))[0]
    assert same_weights(a, b)


def test_post_process_shrinks_jacobian(blobs):
    c = cfg(optimizer=tr.OptimizerConfig(rate=1e-2), epochs_phase1=30, epochs_phase2=30,
            loss=LossConfig(0.1, "jacobian"))
    net1, net2, hist = tr.train(nw.tiny_mlp(2, 2, seed=0), blobs, blobs, c)
    before = avg_jacobian_frobenius(net1, blobs.x[:100])
    after = avg_jacobian_frobenius(net2, blobs.x[:100])
    assert after < before / 2
    acc1 = np.mean(nw.predict(net1, blobs.x) == blobs.y)
    acc2 = np.mean(nw.predict(net2, blobs.x) == blobs.y)
    assert acc2 >= acc1 - 0.02
    assert [r.phase for r in hist.records] == [1] * 30 + [2] * 30
    assert hist.records[-1].probe_jac_fro == pytest.approx(after)


def test_frozen_layer_untouched(blobs):
    net = nw.freeze_orthonormal(nw.tiny_mlp(2, 2, seed=0), 2, seed=4)
    out = tr.post_process(net, blobs, cfg(loss=LossConfig(0.5, "jacobian")))[0]
    assert np.array_equal(out.layers[2].weight, net.layers[2].weight)
    assert np.array_equal(out.layers[2].bias, net.layers[2].bias)
    assert not np.array_equal(out.layers[0].weight, net.layers[0].weight)


def test_adversarial_training_runs(blobs):
    c = cfg(adv_fraction=0.5, adv_attack=AttackConfig("fgsm", epsilon=0.05), epochs_phase1=2)
    a = tr.train_phase(nw.tiny_mlp(2, 2, seed=0), blobs, None, c)[0]
    b = tr.train_phase(nw.tiny_mlp(2, 2, seed=0), blobs, None, c)[0]
    plain = tr.train_phase(nw.tiny_mlp(2, 2, seed=0), blobs, None, cfg(epochs_phase1=2))[0]
    assert same_weights(a, b) and not same_weights(a, plain)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(blobs):
    net = nw.tiny_mlp(2, 2, seed=0)
    net.layers[2].weight = np.full_like(net.layers[2].weight, 1e308)
    with pytest.raises(tr.DivergenceError) as info:
        tr.train_phase(net, blobs, None, cfg())
    assert info.value.epoch == 0
