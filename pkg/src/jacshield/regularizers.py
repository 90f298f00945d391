"""Training objectives: cross-entropy plus an optional input-gradient penalty.

Three penalties are available, all built from per-sample input gradients of
network outputs:

``jacobian``
    Frobenius norm of the logit Jacobian (or of the L-1 / L-2 tap).  By
    default a single square root is taken over the whole mini-batch sum of
    squared partials; ``per_sample_sqrt`` sums per-sample norms instead.
``input_gradient``
    Squared l2 norm of the cross-entropy gradient w.r.t. the input.
``cross_lipschitz``
    Sum over ordered class pairs of squared differences of logit gradients.

Cross-entropy is summed over the batch, not averaged.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .autodiff import evaluate, gradient, ops
from .network import NetGraph, tap_width

REG_KINDS = ("none", "jacobian", "input_gradient", "cross_lipschitz")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.0
    reg_kind: str = "none"
    reg_layer: str = "L"
    per_sample_sqrt: bool = False
    # "train": the penalty reuses the cross-entropy pass and its dropout masks;
    # "eval": the penalty is taken on a dropout-free pass
    jacobian_mode: str = "train"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.reg_kind not in REG_KINDS:
            raise ValueError(f"reg_kind must be one of {REG_KINDS}")
        if self.reg_layer not in ("L", "L-1", "L-2"):
            raise ValueError(f"reg_layer must be L, L-1 or L-2, got {self.reg_layer!r}")
        if self.reg_layer != "L" and self.reg_kind != "jacobian":
            raise ValueError("only the jacobian penalty can target L-1 or L-2")
        if self.jacobian_mode not in ("train", "eval"):
            raise ValueError("jacobian_mode must be 'train' or 'eval'")

    @property
    def active(self):
        return self.reg_kind != "none" and self.lam > 0


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    out = np.zeros(labels.shape + (k,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# --- node builders -----------------------------------------------------------

def cross_entropy_node(logits, onehot):
    """Batch sum of ``-log softmax(logits)[label]``."""
    return ops.sum(ops.softmax_xent(logits, onehot))


def gradient_rows(z, x, width):
    """``[d(sum_i z[i, k]) / dx for k in range(width)]``; one backward pass per row."""
    return [gradient(ops.sum(ops.take(z, k, axis=1)), x) for k in range(width)]


def _per_sample_sq(row, d):
    return ops.sum(ops.square(ops.reshape(row, (-1, d))), axis=1)


def jacobian_penalty_node(rows, d, per_sample_sqrt=False):
    """Frobenius penalty from gradient rows (each shaped like the input batch)."""
    per_sample = _per_sample_sq(rows[0], d)
    for row in rows[1:]:
        per_sample = per_sample + _per_sample_sq(row, d)
    if per_sample_sqrt:
        return ops.sum(ops.sqrt(per_sample))
    return ops.sqrt(ops.sum(per_sample))


def input_gradient_penalty_node(ce, x):
    gx = gradient(ce, x)
    return ops.sum(ops.square(gx))


def cross_lipschitz_penalty_node(rows, d):
    """Ordered-pair sum; each unordered pair is enumerated once and doubled."""
    flat = [ops.reshape(r, (-1, d)) for r in rows]
    total = None
    for k in range(len(flat)):
        for j in range(k):
            term = ops.sum(ops.square(flat[k] - flat[j]))
            total = term if total is None else total + term
    if total is None:
        return ops.sum(ops.zeros_like(flat[0]))
    return total * 2.0


# --- compiled objectives -----------------------------------------------------

class LossGraph:
    """Objective, its parts and its parameter gradients for one architecture.

    ``lam`` is a placeholder, so one graph serves every lambda value.
    """

    def __init__(self, net, cfg, mode="train"):
        self.cfg = cfg
        self.net_graph = ng = NetGraph(net, mode)
        g = ng.graph
        self.graph = g
        self.labels = g.placeholder("y")
        self.lam = g.placeholder("lambda")
        self.ce = cross_entropy_node(ng.logits, self.labels)
        d = net.input_dim
        kind = cfg.reg_kind
        if kind == "none":
            self.penalty = None
        elif kind == "input_gradient":
            self.penalty = input_gradient_penalty_node(self.ce, ng.x)
        else:
            taps = ng.taps
            if cfg.jacobian_mode == "eval" and mode == "train":
                _, taps = ng.build(net, ng.x, masks={})
            layer = cfg.reg_layer
            if layer not in taps:
                raise ValueError(f"network has no {layer} tap")
            rows = gradient_rows(taps[layer], ng.x, tap_width(net, layer))
            if kind == "jacobian":
                self.penalty = jacobian_penalty_node(rows, d, cfg.per_sample_sqrt)
            else:
                self.penalty = cross_lipschitz_penalty_node(rows, d)
        self.total = self.ce if self.penalty is None else self.ce + self.lam * self.penalty
        self.param_nodes = []
        for i, (w, b) in ng.params.items():
            self.param_nodes += [(i, "weight", w), (i, "bias", b)]
        self.grads = gradient(self.total, [n for _, _, n in self.param_nodes])

    def feed(self, net, x, labels, masks=None, lam=None):
        out = self.net_graph.feed(net, x, masks)
        out[self.labels] = one_hot(labels, net.output_dim)
        out[self.lam] = self.cfg.lam if lam is None else lam
        return out

    def values(self, net, x, labels, lam, masks=None, with_grads=True):
        """Evaluate (total, ce, penalty, {(layer, name): grad}) at weight ``lam``."""
        nodes = [self.total, self.ce] + ([self.penalty] if self.penalty is not None else [])
        if with_grads:
            nodes += self.grads
        vals = evaluate(self.graph, nodes, self.feed(net, x, labels, masks, lam))
        pen = float(vals[self.penalty]) if self.penalty is not None else 0.0
        grads = {}
        if with_grads:
            for (i, name, _), gnode in zip(self.param_nodes, self.grads):
                grads[(i, name)] = vals[gnode]
        return float(vals[self.total]), float(vals[self.ce]), pen, grads


_LOSS_LOCK = threading.Lock()
_LOSSES: dict = {}


def loss_graph(net, cfg, mode="train"):
    """Cached :class:`LossGraph`; lambda is not part of the key."""
    key = (net.signature(), mode, cfg.reg_kind if cfg.lam > 0 else "none",
           cfg.reg_layer, cfg.per_sample_sqrt, cfg.jacobian_mode)
    with _LOSS_LOCK:
        if key not in _LOSSES:
            eff = cfg if cfg.lam > 0 else LossConfig(reg_layer="L")
            _LOSSES[key] = LossGraph(net, eff, mode)
        return _LOSSES[key]


# --- value-level helpers -----------------------------------------------------

def _batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        x = x[None]
    if len(x) == 0:
        raise ValueError("empty batch")
    return x


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` for one logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) - (z[label] - m))


def _penalty_value(net, x, labels, cfg):
    x = _batch(net, x)
    if labels is None:
        labels = np.zeros(len(x), dtype=np.int64)
    lg = loss_graph(net, cfg, mode="eval")
    _, _, pen, _ = lg.values(net, x, labels, cfg.lam, with_grads=False)
    return pen


def jacobian_penalty(net, x, cfg):
    """``lam * ||J||_F`` over the batch (one square root unless per-sample)."""
    if cfg.reg_kind != "jacobian":
        raise ValueError("cfg.reg_kind must be 'jacobian'")
    if cfg.lam == 0:
        return 0.0
    return cfg.lam * _penalty_value(net, x, None, cfg)


def input_gradient_penalty(net, x, labels):
    """Batch sum of squared input gradients of the cross-entropy (no lambda)."""
    return _penalty_value(net, x, np.atleast_1d(labels), LossConfig(1.0, "input_gradient"))


def cross_lipschitz_penalty(net, x):
    """Batch sum over ordered class pairs of ``||grad z_k - grad z_j||^2`` (no lambda)."""
    return _penalty_value(net, x, None, LossConfig(1.0, "cross_lipschitz"))


def composite_loss(net, x, labels, cfg, mode="eval", masks=None):
    """Summed cross-entropy plus ``lam`` times the selected penalty."""
    x = _batch(net, x)
    lg = loss_graph(net, cfg, mode)
    total, _, _, _ = lg.values(net, x, np.atleast_1d(labels), cfg.lam, masks,
                               with_grads=False)
    return total
