"""Central finite-difference check of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import evaluate, gradient


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def relative_error(a, b, floor=1e-8):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(scalar, wrt, feed, step=1e-5):
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for every entry of ``wrt``."""
    base = np.array(feed[wrt], dtype=np.float64)
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        vals = []
        for sign in (1.0, -1.0):
            x = base.copy()
            x.reshape(-1)[i] += sign * step
            vals.append(float(np.sum(evaluate(scalar.graph, scalar, {**feed, wrt: x}))))
        flat[i] = (vals[0] - vals[1]) / (2 * step)
    return out


def check_gradient(scalar, wrt, feed, step=1e-5, tol=1e-4, grad_node=None):
    """Compare the autodiff gradient of ``scalar`` w.r.t. placeholder ``wrt``
    against central finite differences.

    Passes iff the largest elementwise relative error is at most ``tol``.
    A prebuilt ``grad_node`` may be supplied to avoid growing the graph on
    repeated checks.  Non-smooth points (``|x|`` at 0) are expected to fail.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if grad_node is None:
        grad_node = gradient(scalar, wrt)
    analytic = np.broadcast_to(evaluate(scalar.graph, grad_node, feed),
                               np.shape(feed[wrt])).astype(float)
    numeric = numeric_gradient(scalar, wrt, feed, step)
    err = float(relative_error(analytic, numeric).max()) if analytic.size else 0.0
    return GradCheckReport(err, err <= tol, analytic, numeric)
