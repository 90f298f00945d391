"""Adversarial example generation: FGSM, DeepFool and a one-pixel-at-a-time JSMA.

Every attack returns :class:`AttackOutcome` records with the perturbed input
and the l0 / l2 / linf norms of the perturbation.  The ``*_batch`` variants
attack many samples at once; samples do not interact, so per-sample results
depend on the batching only through floating-point rounding, and a fixed
batching gives bit-identical results.

An attack counts as successful when the prediction at ``x_pert`` differs from
the reference label: the ground-truth label when one is given, otherwise the
prediction at the clean input.  The change must be decisive: some other
logit has to beat the reference logit by more than ``TIE_TOL`` relative to
the logit scale.  Exact ties, which DeepFool can land on, would otherwise be
broken by rounding noise that depends on how inputs are batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from .autodiff import evaluate, gradient
from .regularizers import cross_entropy_node, one_hot

ATTACK_KINDS = ("fgsm", "deepfool", "jsma")
TIE_TOL = 1e-9


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "deepfool"
    epsilon: float = 0.1
    max_iter: int = 50
    epochs: int = 80
    pixels_per_epoch: int = 1
    overshoot: float = 0.02
    clip_min: float = 0.0
    clip_max: float = 1.0
    sign_convention: str = "ascent"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and nonnegative, got {self.epsilon}")
        if self.max_iter < 1 or self.epochs < 1 or self.pixels_per_epoch < 1:
            raise ValueError("max_iter, epochs and pixels_per_epoch must be positive")
        if self.overshoot < 0:
            raise ValueError("overshoot must be nonnegative")
        if math.isnan(self.clip_min) or math.isnan(self.clip_max) or not self.clip_min < self.clip_max:
            raise ValueError("need clip_min < clip_max")
        if self.sign_convention not in ("ascent", "paper_literal"):
            raise ValueError("sign_convention must be 'ascent' or 'paper_literal'")


@dataclass
class AttackOutcome:
    x: np.ndarray
    x_pert: np.ndarray
    success: bool
    iterations: int
    l0: int
    l2: float
    linf: float
    reference: int
    # DeepFool only: l2 norm of the perturbation before the overshoot factor
    pre_overshoot_l2: float | None = None
    # JSMA only: "increase" / "decrease" per epoch
    variants: list = field(default_factory=list)

    @property
    def norms(self):
        return {"l0": self.l0, "l2": self.l2, "linf": self.linf}


def perturbation_norms(x, x_pert):
    d = (np.asarray(x_pert, dtype=np.float64) - np.asarray(x, dtype=np.float64)).ravel()
    return int(np.count_nonzero(d)), float(np.linalg.norm(d)), float(np.abs(d).max(initial=0.0))


def flipped_away(z, refs):
    """Rows of logits ``z`` where another class decisively beats ``refs``."""
    z = np.atleast_2d(z)
    refs = np.asarray(refs).reshape(-1)
    rows = np.arange(len(z))
    others = z.copy()
    others[rows, refs] = -np.inf
    tol = TIE_TOL * (1.0 + np.abs(z).max(axis=1))
    return others.max(axis=1) - z[rows, refs] > tol


def _outcome(net, x, x_pert, reference, iterations, **extra):
    l0, l2, linf = perturbation_norms(x, x_pert)
    success = bool(flipped_away(nw.logits(net, x_pert), [reference])[0])
    return AttackOutcome(x, x_pert, success, int(iterations), l0, l2, linf, int(reference), **extra)


def _batch(net, x):
    xb = np.asarray(x, dtype=np.float64)
    if xb.shape[1:] != net.input_shape:
        raise ValueError(f"expected a batch of shape (N,) + {net.input_shape}, got {xb.shape}")
    return xb


def _references(net, xb, labels):
    if labels is None:
        return nw.predict(net, xb) if len(xb) else np.zeros(0, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(xb):
        raise ValueError("labels and inputs differ in length")
    return labels


def _logits_and_jacobian(net, xb):
    """Eval-mode logits (N, K) and logit Jacobians (N, K, D) in one pass."""
    g = nw.compiled(net, "eval")
    rows = g.row_nodes("L", net.output_dim)
    z = np.empty((len(xb), net.output_dim))
    jac = np.empty((len(xb), net.output_dim, net.input_dim))
    for s in range(0, len(xb), 128):
        chunk = xb[s:s + 128]
        vals = evaluate(g.graph, [g.logits] + rows, g.feed(net, chunk))
        z[s:s + len(chunk)] = vals[g.logits]
        for k, node in enumerate(rows):
            jac[s:s + len(chunk), k] = vals[node].reshape(len(chunk), -1)
    return z, jac


# --- FGSM --------------------------------------------------------------------

def _ce_input_grad(g):
    y = g.graph.placeholder("fgsm_y")
    ce = cross_entropy_node(g.logits, y)
    return y, gradient(ce, g.x)


def loss_input_gradient(net, x, labels):
    """Per-sample gradient of the cross-entropy w.r.t. the input batch."""
    xb = _batch(net, x)
    g = nw.compiled(net, "eval")
    y, gx = g.extra("ce_input_grad", _ce_input_grad)
    feed = g.feed(net, xb)
    feed[y] = one_hot(labels, net.output_dim)
    return evaluate(g.graph, gx, feed)


def fgsm_batch(net, x, labels, cfg):
    xb = _batch(net, x)
    labels = _references(net, xb, labels)
    if len(xb) == 0:
        return []
    sign = np.sign(loss_input_gradient(net, xb, labels))
    if cfg.sign_convention == "paper_literal":
        sign = -sign
    x_pert = np.clip(xb + cfg.epsilon * sign, cfg.clip_min, cfg.clip_max)
    return [_outcome(net, xb[i], x_pert[i], labels[i], 1) for i in range(len(xb))]


def fgsm(net, x, label, cfg):
    """One signed-gradient step of size ``epsilon`` on the cross-entropy."""
    return fgsm_batch(net, np.asarray(x, dtype=np.float64)[None], [label], cfg)[0]


# --- DeepFool ----------------------------------------------------------------

def deepfool_batch(net, x, cfg, labels=None):
    """Iterated linearised minimal l2 steps until the prediction changes.

    The accumulated step ``r`` is applied as ``x + (1 + overshoot) r``; the
    stored ``pre_overshoot_l2`` is the norm of the clipped ``x + r`` minus x.
    Coordinates pinned at the clip box in the direction of a step are left
    out of that step's linearisation, so attacks on saturated images do not
    stall against the box.
    """
    xb = _batch(net, x)
    n = len(xb)
    if n == 0:
        return []
    refs = _references(net, xb, labels)
    orig = nw.predict(net, xb)
    r_tot = np.zeros_like(xb)
    iters = np.zeros(n, dtype=np.int64)
    active = orig == refs
    scale = 1.0 + cfg.overshoot

    def current(idx):
        return np.clip(xb[idx] + scale * r_tot[idx], cfg.clip_min, cfg.clip_max)

    for _ in range(cfg.max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        xc = current(idx)
        z, jac = _logits_and_jacobian(net, xc)
        flipped = flipped_away(z, orig[idx])
        active[idx[flipped]] = False
        keep = ~flipped
        idx, z, jac, xc = idx[keep], z[keep], jac[keep], xc[keep]
        if len(idx) == 0:
            break
        rows = np.arange(len(idx))
        ks = orig[idx]
        w = jac - jac[rows, ks][:, None, :]
        f = z - z[rows, ks][:, None]
        # moving toward class k means ascending w_k; coordinates already at the
        # box edge in that direction cannot move, so they leave the linear model
        flat = xc.reshape(len(xc), 1, -1)
        blocked = ((w > 0) & (flat >= cfg.clip_max)) | ((w < 0) & (flat <= cfg.clip_min))
        w = np.where(blocked, 0.0, w)
        wnorm = np.linalg.norm(w, axis=2)
        valid = wnorm >= 1e-12
        valid[rows, ks] = False
        dist = np.where(valid, np.abs(f) / np.where(valid, wnorm, 1.0), np.inf)
        best = np.argmin(dist, axis=1)
        # a zero step means x sits on the boundary without crossing it
        stuck = ~np.isfinite(dist[rows, best]) | (dist[rows, best] == 0)
        active[idx[stuck]] = False
        go = ~stuck
        idx, rows, best = idx[go], rows[go], best[go]
        step = dist[rows, best][:, None] * w[rows, best] / wnorm[rows, best][:, None]
        r_tot[idx] += step.reshape((len(idx),) + net.input_shape)
        iters[idx] += 1

    x_pert = np.clip(xb + scale * r_tot, cfg.clip_min, cfg.clip_max)
    pre = np.clip(xb + r_tot, cfg.clip_min, cfg.clip_max) - xb
    pre_l2 = np.linalg.norm(pre.reshape(n, -1), axis=1)
    return [_outcome(net, xb[i], x_pert[i], refs[i], iters[i], pre_overshoot_l2=float(pre_l2[i]))
            for i in range(n)]


def deepfool(net, x, cfg, label=None):
    """Minimal l2 attack through successive linearisations of the logits."""
    labels = None if label is None else [label]
    return deepfool_batch(net, np.asarray(x, dtype=np.float64)[None], cfg, labels)[0]


# --- JSMA --------------------------------------------------------------------

def _pick(score, alpha_abs, admissible, count):
    """Top ``count`` admissible pixels by score, then |alpha|, then lowest index."""
    cand = np.flatnonzero(admissible)
    if len(cand) == 0:
        return cand, -np.inf, -np.inf
    order = np.lexsort((cand, -alpha_abs[cand], -score[cand]))
    chosen = cand[order[:count]]
    return chosen, score[chosen[0]], alpha_abs[chosen[0]]


def jsma_batch(net, x, labels, cfg):
    """Saliency-map attack toward the runner-up class, changing pixels by ``epsilon``.

    Increase variant: ``alpha > 0`` and ``beta <= 0``; decrease variant:
    ``alpha < 0`` and ``beta >= 0``; score ``|alpha| * |beta|``.  Each epoch
    uses whichever variant has the higher best score.
    """
    xb = _batch(net, x)
    n = len(xb)
    if n == 0:
        return []
    refs = _references(net, xb, labels)
    xs = xb.reshape(n, -1).copy()
    iters = np.zeros(n, dtype=np.int64)
    variants = [[] for _ in range(n)]
    running = np.ones(n, dtype=bool)
    for _ in range(cfg.epochs):
        idx = np.flatnonzero(running)
        if len(idx) == 0:
            break
        z, jac = _logits_and_jacobian(net, xs[idx].reshape((len(idx),) + net.input_shape))
        flipped = flipped_away(z, refs[idx])
        running[idx[flipped]] = False
        for j in np.flatnonzero(~flipped):
            i = idx[j]
            top = np.argsort(-z[j], kind="stable")
            target = top[1] if top[0] == refs[i] else top[0]
            alpha = jac[j, target]
            beta = jac[j].sum(axis=0) - alpha
            score = np.abs(alpha) * np.abs(beta)
            a_abs = np.abs(alpha)
            xi = xs[i]
            inc = _pick(score, a_abs, (alpha > 0) & (beta <= 0) & (xi < cfg.clip_max),
                        cfg.pixels_per_epoch)
            dec = _pick(score, a_abs, (alpha < 0) & (beta >= 0) & (xi > cfg.clip_min),
                        cfg.pixels_per_epoch)
            if len(inc[0]) == 0 and len(dec[0]) == 0:
                running[i] = False
                continue
            use_inc = len(dec[0]) == 0 or (len(inc[0]) > 0 and inc[1:] >= dec[1:])
            chosen, sign = (inc[0], 1.0) if use_inc else (dec[0], -1.0)
            xi[chosen] = np.clip(xi[chosen] + sign * cfg.epsilon, cfg.clip_min, cfg.clip_max)
            variants[i].append("increase" if use_inc else "decrease")
            iters[i] += 1
    x_pert = xs.reshape(xb.shape)
    return [_outcome(net, xb[i], x_pert[i], refs[i], iters[i], variants=variants[i])
            for i in range(n)]


def jsma(net, x, label, cfg):
    return jsma_batch(net, np.asarray(x, dtype=np.float64)[None], [label], cfg)[0]


# --- dispatch ----------------------------------------------------------------

def run_attack(net, x, labels, cfg):
    """Attack a batch with the method named by ``cfg.kind``."""
    if cfg.kind == "fgsm":
        return fgsm_batch(net, x, labels, cfg)
    if cfg.kind == "deepfool":
        return deepfool_batch(net, x, cfg, labels)
    return jsma_batch(net, x, labels, cfg)
