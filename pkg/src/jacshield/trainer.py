"""Mini-batch training: a plain first phase, then a regularized second phase.

Shuffles, dropout masks and adversarial picks are drawn from generators keyed
on ``(seed, phase, epoch, batch)``, so a run is fully determined by its config.
Optimizer state starts fresh at each phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import network as nw
from .attacks import AttackConfig, run_attack
from .regularizers import LossConfig, loss_graph
from .robustness import avg_jacobian_frobenius

OPTIMIZERS = ("adam", "rmsprop", "sgd")


class DivergenceError(FloatingPointError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.rate <= 0 or self.eps < 0:
            raise ValueError("rate must be positive and eps nonnegative")
        for name in ("beta1", "beta2", "decay"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = 50
    epochs_phase1: int = 10
    epochs_phase2: int = 5
    loss: LossConfig = LossConfig()
    adv_fraction: float = 0.0
    adv_attack: AttackConfig | None = None
    seed: int = 0
    probe_size: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("epoch counts must be nonnegative")
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ValueError("adv_fraction must lie in [0, 1]")
        if self.adv_fraction > 0 and self.adv_attack is None:
            raise ValueError("adv_fraction > 0 needs adv_attack")


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    loss: float
    ce: float
    penalty: float
    test_accuracy: float | None
    probe_jac_fro: float | None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def extend(self, other):
        self.records += other.records


# --- optimizers --------------------------------------------------------------

def optimizer_step(params, grads, state, cfg):
    """Update ``params`` (dict of arrays) in place; ``state`` holds moments and the step count.

    Keys absent from ``grads`` (frozen layers) are left alone.
    """
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {key}")
    state["t"] = t = state.get("t", 0) + 1
    for key, g in grads.items():
        p = params[key]
        if cfg.kind == "sgd":
            p -= cfg.rate * g
        elif cfg.kind == "adam":
            m = state.setdefault(("m", key), np.zeros_like(p))
            v = state.setdefault(("v", key), np.zeros_like(p))
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** t)
            v_hat = v / (1 - cfg.beta2 ** t)
            p -= cfg.rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        else:
            v = state.setdefault(("v", key), np.zeros_like(p))
            v *= cfg.decay
            v += (1 - cfg.decay) * g * g
            p -= cfg.rate * g / (np.sqrt(v) + cfg.eps)
    return params, state


def _trainable(net):
    """``{(layer, "weight"|"bias"): array}`` views into the non-frozen layers."""
    out = {}
    for i in net.param_layers():
        layer = net.layers[i]
        if not layer.frozen:
            out[(i, "weight")] = layer.weight
            out[(i, "bias")] = layer.bias
    return out


# --- adversarial mixing ------------------------------------------------------

def mix_adversarial(x, y, net, attack_cfg, fraction, seed):
    """Replace ``floor(fraction * B)`` random samples by attacked versions.

    Labels are kept.  ``seed`` may be an int or a tuple of ints.  Returns the
    new inputs and the sorted indices that were replaced.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    x = np.array(x, dtype=np.float64)
    n = int(math.floor(fraction * len(x)))
    if n == 0:
        return x, np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(list(np.atleast_1d(seed)))
    idx = np.sort(rng.choice(len(x), n, replace=False))
    outs = run_attack(net, x[idx], np.asarray(y)[idx], attack_cfg)
    x[idx] = np.stack([o.x_pert for o in outs])
    return x, idx


# --- training loops ----------------------------------------------------------

def _run(net, train_set, test_set, cfg, loss_cfg, epochs, phase):
    net = net.copy()
    history = TrainHistory()
    params = _trainable(net)
    state = {}
    lg = loss_graph(net, loss_cfg, "train")
    probe = None
    if test_set is not None and cfg.probe_size > 0:
        probe = test_set.x[:cfg.probe_size]
    n = len(train_set)
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, phase, epoch]).permutation(n)
        tot = ce_sum = pen_sum = 0.0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xb, yb = train_set.x[idx], train_set.y[idx]
            if cfg.adv_fraction > 0:
                xb, _ = mix_adversarial(xb, yb, net, cfg.adv_attack, cfg.adv_fraction,
                                        (cfg.seed, phase, epoch, b))
            masks = nw.draw_masks(net, len(xb), (cfg.seed, phase, epoch, b))
            try:
                total, ce, pen, grads = lg.values(net, xb, yb, loss_cfg.lam, masks)
            except FloatingPointError as exc:
                raise DivergenceError(f"non-finite loss in phase {phase} epoch {epoch}: {exc}",
                                      epoch) from exc
            grads = {k: g for k, g in grads.items() if k in params}
            try:
                optimizer_step(params, grads, state, cfg.optimizer)
            except DivergenceError as exc:
                raise DivergenceError(f"phase {phase} epoch {epoch}: {exc}", epoch) from exc
            tot += total
            ce_sum += ce
            pen_sum += pen
        acc = jac = None
        if test_set is not None:
            acc = float(np.mean(nw.predict(net, test_set.x) == test_set.y))
        if probe is not None and len(probe):
            jac = avg_jacobian_frobenius(net, probe)
        history.records.append(EpochRecord(phase, epoch, tot, ce_sum, pen_sum, acc, jac))
    return net, history


def train_phase(net, train_set, test_set, cfg, phase=1, loss=None, epochs=None):
    """``cfg.epochs_phase1`` epochs on ``loss`` (plain cross-entropy unless given)."""
    loss = LossConfig() if loss is None else loss
    epochs = cfg.epochs_phase1 if epochs is None else epochs
    return _run(net, train_set, test_set, cfg, loss, epochs, phase)


def post_process(net, train_set, cfg, test_set=None):
    """Continue training a trained ``net`` on ``cfg.loss`` for ``cfg.epochs_phase2`` epochs."""
    return _run(net, train_set, test_set, cfg, cfg.loss, cfg.epochs_phase2, 2)


def train(net, train_set, test_set, cfg, phase1_loss=None):
    """Both phases; returns (phase-1 net, final net, combined history)."""
    net1, hist = train_phase(net, train_set, test_set, cfg, 1, phase1_loss)
    net2, hist2 = post_process(net1, train_set, cfg, test_set)
    hist.extend(hist2)
    return net1, net2, hist
