"""Robustness metrics and checks of the Jacobian-based distance bounds.

Quantities, for a sample ``x`` predicted as class ``k*`` with logits ``z`` and
logit Jacobian ``J`` (rows ``J_k``):

* ``d_cor2``: ``min_k |z_k* - z_k| / ||J_k* - J_k||``, the linearised distance
  to the nearest decision boundary;
* ``d_prop3``: ``min_k |z_k* - z_k| / (sqrt(2) ||J||_F)``, a lower bound of it;
* ``d_prop4``: the same margin over ``sqrt(2) ||J^(L-1)||_F``, valid when the
  final dense layer has frozen orthonormal columns.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import network as nw
from .attacks import AttackConfig, deepfool_batch, run_attack

REPORT_VERSION = 1
SQRT2 = math.sqrt(2.0)


def _xy(dataset, labels=None):
    if labels is not None:
        return np.asarray(dataset, dtype=np.float64), np.asarray(labels, dtype=np.int64)
    if hasattr(dataset, "x"):
        return np.asarray(dataset.x, dtype=np.float64), np.asarray(dataset.y, dtype=np.int64)
    x, y = dataset
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def fmean(values):
    """Order-independent mean (compensated summation)."""
    values = list(values)
    if not values:
        raise ValueError("mean of no values")
    return math.fsum(values) / len(values)


def map_chunks(fn, chunks, threads=1):
    """``[fn(c) for c in chunks]``, optionally on a thread pool; order is kept."""
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, chunks))


# --- rho_adv -----------------------------------------------------------------

@dataclass
class RhoResult:
    rho_adv: float
    n_evaluated: int
    n_skipped_misclassified: int
    n_failed: int
    ratios: list
    outcomes: list = field(repr=False)
    # index into the dataset of each outcome
    indices: list = field(repr=False)


def rho_adv(net, dataset, cfg=None, labels=None, include_overshoot=False, batch_size=200,
            threads=1):
    """Mean of ``||r|| / ||x||`` over correctly classified, successfully attacked samples.

    ``r`` is the DeepFool perturbation before the overshoot factor unless
    ``include_overshoot`` is set.
    """
    cfg = cfg or AttackConfig("deepfool")
    if cfg.kind != "deepfool":
        raise ValueError("rho_adv needs a deepfool attack config")
    x, y = _xy(dataset, labels)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    correct = np.flatnonzero(nw.predict(net, x) == y)
    chunks = [correct[s:s + batch_size] for s in range(0, len(correct), batch_size)]
    parts = map_chunks(lambda idx: deepfool_batch(net, x[idx], cfg, y[idx]), chunks, threads)
    outcomes = [o for part in parts for o in part]
    ratios = []
    for i, out in zip(correct, outcomes):
        if not out.success:
            continue
        d = out.l2 if include_overshoot else out.pre_overshoot_l2
        ratios.append(d / float(np.linalg.norm(x[i])))
    if not ratios:
        raise ValueError("no evaluable samples")
    return RhoResult(fmean(ratios), len(ratios), len(x) - len(correct),
                     len(correct) - len(ratios), ratios, outcomes, list(correct))


# --- Jacobian norms ----------------------------------------------------------

def jacobian_frobenius(net, samples, layer="L"):
    """Per-sample ``||J(x_i)||_F`` (eval mode)."""
    jac = nw.jacobian_batch(net, samples, layer)
    return np.sqrt(np.einsum("nmd,nmd->n", jac, jac))


def avg_jacobian_frobenius(net, samples, layer="L"):
    """Mean Frobenius norm of the per-sample Jacobian."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape == net.input_shape:
        samples = samples[None]
    if len(samples) == 0:
        raise ValueError("no samples")
    return fmean(jacobian_frobenius(net, samples, layer))


# --- distance bounds ---------------------------------------------------------

@dataclass
class BoundReport:
    sample_id: int | None
    predicted: int
    logit_margin: float
    d_cor2: float
    d_prop3: float
    d_prop4: float | None = None
    d_measured: float | None = None
    # names of bounds whose denominator vanished (recorded as +inf)
    degenerate: list = field(default_factory=list)


def last_layer_orthonormal(net, tol=1e-10):
    last = net.layers[net.dense_indices()[-1]]
    return bool(last.frozen and nw.is_orthonormal(last.weight, tol)
                and not np.any(last.bias))


def _ratio(num, den):
    return num / den if den > 0 else math.inf


def fooling_bounds_batch(net, x, outcomes=None, sample_ids=None):
    xb = np.asarray(x, dtype=np.float64)
    z = nw.logits(net, xb)
    jac = nw.jacobian_batch(net, xb, "L")
    with_prop4 = last_layer_orthonormal(net) and "L-1" in nw.compiled(net).taps
    jac1 = nw.jacobian_batch(net, xb, "L-1") if with_prop4 else None
    reports = []
    for i in range(len(xb)):
        k_star = int(np.argmax(z[i]))
        others = [k for k in range(net.output_dim) if k != k_star]
        gaps = np.abs(z[i, k_star] - z[i, others])
        diffs = np.linalg.norm(jac[i, k_star] - jac[i, others], axis=1)
        margin = float(gaps.min())
        cor2 = min(_ratio(g, d) for g, d in zip(gaps, diffs))
        prop3 = _ratio(margin, SQRT2 * float(np.linalg.norm(jac[i])))
        prop4 = None
        if with_prop4:
            prop4 = _ratio(margin, SQRT2 * float(np.linalg.norm(jac1[i])))
        degenerate = [name for name, v in (("d_cor2", cor2), ("d_prop3", prop3),
                                           ("d_prop4", prop4)) if v == math.inf]
        measured = None
        if outcomes is not None and outcomes[i] is not None:
            measured = outcomes[i].pre_overshoot_l2
        sid = None if sample_ids is None else int(sample_ids[i])
        reports.append(BoundReport(sid, k_star, margin, cor2, prop3, prop4, measured, degenerate))
    return reports


def chain_violated(report, tol=1e-10):
    """True if a lower bound exceeds the linearised distance it bounds."""
    if report.d_prop3 > report.d_cor2 + tol:
        return True
    return report.d_prop4 is not None and report.d_prop4 > report.d_cor2 + tol


def fooling_bounds(net, x, outcome=None, sample_id=None):
    """Distances to the decision boundary implied by the Jacobian at ``x``."""
    outs = None if outcome is None else [outcome]
    sid = None if sample_id is None else [sample_id]
    return fooling_bounds_batch(net, np.asarray(x, dtype=np.float64)[None], outs, sid)[0]


# --- curvature and mean-value diagnostics ------------------------------------

def curvature_diagnostics(net, x, k1, k2):
    """``(J_k1 x)^2 - (J_k2 x)^2`` against its bound ``||J||_F^2 ||x||^2``."""
    if k1 == k2:
        raise ValueError("k1 and k2 must differ")
    x = np.asarray(x, dtype=np.float64)
    jac = nw.jacobian(net, x).rows
    flat = x.ravel()
    approx = float((jac[k1] @ flat) ** 2 - (jac[k2] @ flat) ** 2)
    bound = float(np.sum(jac * jac) * (flat @ flat))
    return {"approx_curvature": approx, "upper_bound": bound}


def mvt_diagnostic(net, x, x_pert, n_samples=64):
    """Logit change per unit input change vs. the largest ``||J||_F`` on the segment."""
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    x = np.asarray(x, dtype=np.float64)
    x_pert = np.asarray(x_pert, dtype=np.float64)
    dist = float(np.linalg.norm(x_pert - x))
    if dist == 0:
        raise ValueError("x and x_pert coincide")
    z = nw.logits(net, np.stack([x, x_pert]))
    ratio = float(np.linalg.norm(z[1] - z[0])) / dist
    t = np.linspace(0.0, 1.0, n_samples).reshape((-1,) + (1,) * x.ndim)
    seg = x + t * (x_pert - x)
    return {"lhs_ratio": ratio, "max_jac_fro_on_segment": float(jacobian_frobenius(net, seg).max())}


# --- attack curves -----------------------------------------------------------

def accuracy_under_attack(net, dataset, attack_cfg, epsilon_grid, labels=None, threads=1,
                          batch_size=200):
    """``[(eps, accuracy on attacked inputs)]`` for each ``eps`` in the grid."""
    x, y = _xy(dataset, labels)
    grid = [float(e) for e in epsilon_grid]
    if not grid:
        raise ValueError("epsilon grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("epsilon grid must be ascending")
    curve = []
    chunks = [np.arange(s, min(s + batch_size, len(x))) for s in range(0, len(x), batch_size)]
    for eps in grid:
        cfg = replace(attack_cfg, epsilon=eps)
        parts = map_chunks(lambda idx: run_attack(net, x[idx], y[idx], cfg), chunks, threads)
        x_pert = np.stack([o.x_pert for part in parts for o in part])
        curve.append((eps, float(np.mean(nw.predict(net, x_pert) == y))))
    return curve


# --- full report -------------------------------------------------------------

@dataclass
class RobustnessReport:
    rho_adv: float
    n_evaluated: int
    n_skipped_misclassified: int
    n_failed: int
    clean_accuracy: float
    attack_curves: dict
    avg_jac_fro_clean: float
    avg_jac_fro_perturbed: float
    bound_violation_rate: float
    measured_below_prop3_rate: float
    jsma_variants: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_dict(self):
        out = asdict(self)
        out["attack_curves"] = {k: [list(p) for p in v] for k, v in self.attack_curves.items()}
        return out


def evaluate_robustness(net, dataset, labels=None, deepfool_cfg=None, curves=None,
                        jsma_cfg=None, n_bounds=None, threads=1):
    """DeepFool statistics, Jacobian norms, bound checks and attack curves.

    ``curves`` maps a name to ``(AttackConfig, epsilon_grid)``.  Bounds and
    Jacobian norms use the first ``n_bounds`` evaluated samples (all if None).
    """
    x, y = _xy(dataset, labels)
    rho = rho_adv(net, (x, y), deepfool_cfg, threads=threads)
    clean_acc = float(np.mean(nw.predict(net, x) == y))
    ok = [(i, o) for i, o in zip(rho.indices, rho.outcomes) if o.success]
    if n_bounds is not None:
        ok = ok[:n_bounds]
    idx = np.array([i for i, _ in ok])
    outs = [o for _, o in ok]
    jac_clean = avg_jacobian_frobenius(net, x[idx])
    jac_pert = avg_jacobian_frobenius(net, np.stack([o.x_pert for o in outs]))
    bounds = fooling_bounds_batch(net, x[idx], outs, idx)
    chain = sum(chain_violated(b) for b in bounds)
    below = sum(b.d_measured < b.d_prop3 for b in bounds)
    attack_curves = {}
    for name, (cfg, grid) in (curves or {}).items():
        attack_curves[name] = accuracy_under_attack(net, (x, y), cfg, grid, threads=threads)
    variants = {}
    if jsma_cfg is not None:
        outs_j = run_attack(net, x[idx], y[idx], jsma_cfg)
        flat = [v for o in outs_j for v in o.variants]
        variants = {"increase": flat.count("increase"), "decrease": flat.count("decrease"),
                    "success_rate": float(np.mean([o.success for o in outs_j]))}
    return RobustnessReport(rho.rho_adv, rho.n_evaluated, rho.n_skipped_misclassified,
                            rho.n_failed, clean_acc, attack_curves, jac_clean, jac_pert,
                            chain / len(bounds), below / len(bounds), variants)
