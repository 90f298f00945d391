"""Primitive operations and their vector-Jacobian products.

Each primitive has a numpy ``forward`` and a ``vjp`` that builds the parent
gradients out of other primitives.  The set is closed under ``vjp``, which is
what makes gradients of gradients possible.  Values are float64 throughout.

Conventions worth knowing:

* Binary elementwise ops broadcast like numpy; their gradients are reduced
  back to each operand's runtime shape with ``sum_like``.
* ``relu`` has derivative 0 at 0.  ``maxpool2`` routes the gradient to the
  first maximum of each window.  Both are piecewise linear, so their second
  derivative is zero almost everywhere.
* ``conv2d`` is an im2col ``unfold`` followed by ``matmul``; padding is a
  separate ``pad`` node.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graph import GraphError, Node


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable


OPS: dict[str, Primitive] = {}


def _register(name, forward, vjp):
    OPS[name] = Primitive(name, forward, vjp)


def _make(op, *parents, **attrs):
    return parents[0].graph.add_node(op, parents, attrs)


def _none(node, g):
    return (None,) * len(node.parents)


# --- shape plumbing ---------------------------------------------------------

def _sum_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead < 0:
        raise ValueError(f"cannot reduce {g.shape} to {shape}")
    out = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    if out.shape != shape:
        raise ValueError(f"cannot reduce {g.shape} to {shape}")
    return out


def sum_like(g, ref):
    """Sum ``g`` over broadcast axes so it takes ``ref``'s runtime shape."""
    return _make("sum_like", g, ref)


def broadcast_like(x, ref):
    return _make("broadcast_like", x, ref)


_register("sum_like", lambda g, ref: _sum_to(g, ref.shape),
          lambda n, g: (broadcast_like(g, n.parents[0]), None))
_register("broadcast_like", lambda x, ref: np.broadcast_to(x, ref.shape),
          lambda n, g: (sum_like(g, n.parents[0]), None))


def zeros_like(x):
    return _make("zeros_like", x)


_register("zeros_like", lambda x: np.zeros_like(x), _none)


def _seed(y):
    if y.size != 1:
        raise GraphError(f"gradient target must be scalar, got shape {y.shape}")
    return np.ones_like(y)


def scalar_seed(y):
    return _make("scalar_seed", y)


_register("scalar_seed", _seed, _none)


def reshape(x, shape):
    return _make("reshape", x, shape=tuple(shape))


def reshape_like(x, ref):
    return _make("reshape_like", x, ref)


_register("reshape", lambda x, shape: x.reshape(shape),
          lambda n, g: (reshape_like(g, n.parents[0]),))
_register("reshape_like", lambda x, ref: x.reshape(ref.shape),
          lambda n, g: (reshape_like(g, n.parents[0]), None))


def transpose(x):
    """Transpose of a 2-D node."""
    return _make("transpose", x)


def _transpose(x):
    if x.ndim != 2:
        raise ValueError(f"transpose expects 2-D input, got {x.shape}")
    return x.T


_register("transpose", _transpose, lambda n, g: (transpose(g),))


def expand_dims(x, axis):
    return _make("expand_dims", x, axis=axis)


_register("expand_dims", lambda x, axis: np.expand_dims(x, axis),
          lambda n, g: (sum(g, axis=n.attrs["axis"]),))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if isinstance(axis, list):
        axis = tuple(axis)
    return _make("sum", x, axis=axis, keepdims=keepdims)


def _sum_vjp(n, g):
    x = n.parents[0]
    axis, keepdims = n.attrs["axis"], n.attrs["keepdims"]
    if axis is not None and not keepdims:
        g = expand_dims(g, axis)
    return (broadcast_like(g, x),)


_register("sum", lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
          _sum_vjp)


def _key_attr(key):
    if not isinstance(key, tuple):
        key = (key,)
    out = []
    for k in key:
        if isinstance(k, slice):
            out.append(("s", k.start, k.stop, k.step))
        elif isinstance(k, (int, np.integer)):
            out.append(("i", int(k)))
        else:
            raise TypeError(f"unsupported index {k!r}")
    return tuple(out)


def _key(attr):
    return tuple(slice(a[1], a[2], a[3]) if a[0] == "s" else a[1] for a in attr)


def slice_(x, key):
    """``x[key]`` for keys made of ints and basic slices."""
    return _make("slice", x, key=_key_attr(key))


def unslice(g, ref, key):
    """Zeros shaped like ``ref`` with ``g`` written at ``key``."""
    return _make("unslice", g, ref, key=_key_attr(key))


def _unslice(g, ref, key):
    out = np.zeros(ref.shape)
    out[_key(key)] = g
    return out


_register("slice", lambda x, key: x[_key(key)],
          lambda n, g: (_make("unslice", g, n.parents[0], key=n.attrs["key"]),))
_register("unslice", _unslice,
          lambda n, g: (_make("slice", g, key=n.attrs["key"]), None))


def take(x, k, axis=-1):
    """Select index ``k`` along ``axis``, dropping that axis."""
    if axis < 0:
        raise ValueError("take needs a non-negative axis")
    key = (slice(None),) * axis + (int(k),)
    return slice_(x, key)


def pad(x, pads):
    """Zero-pad; ``pads`` is one (before, after) pair per axis."""
    return _make("pad", x, pads=tuple((int(a), int(b)) for a, b in pads))


def _pad_vjp(n, g):
    key = tuple(slice(a, -b if b else None) for a, b in n.attrs["pads"])
    return (slice_(g, key),)


_register("pad", lambda x, pads: np.pad(x, pads), _pad_vjp)


# --- arithmetic -------------------------------------------------------------

def add(a, b):
    return _make("add", a, b)


def sub(a, b):
    return _make("sub", a, b)


def mul(a, b):
    return _make("mul", a, b)


def div(a, b):
    return _make("div", a, b)


def neg(a):
    return _make("neg", a)


_register("add", np.add,
          lambda n, g: (sum_like(g, n.parents[0]), sum_like(g, n.parents[1])))
_register("sub", np.subtract,
          lambda n, g: (sum_like(g, n.parents[0]), neg(sum_like(g, n.parents[1]))))
_register("mul", np.multiply,
          lambda n, g: (sum_like(mul(g, n.parents[1]), n.parents[0]),
                        sum_like(mul(g, n.parents[0]), n.parents[1])))
_register("div", np.divide,
          lambda n, g: (sum_like(div(g, n.parents[1]), n.parents[0]),
                        sum_like(neg(div(mul(g, n), n.parents[1])), n.parents[1])))
_register("neg", np.negative, lambda n, g: (neg(g),))


def matmul(a, b):
    """``a @ b`` with ``b`` 2-D; leading axes of ``a`` are batch axes."""
    return _make("matmul", a, b)


def matmul_wgrad(a, g):
    """Contract all leading axes: ``a.reshape(-1, P).T @ g.reshape(-1, O)``."""
    return _make("matmul_wgrad", a, g)


def _matmul(a, b):
    if b.ndim != 2:
        raise ValueError(f"matmul expects a 2-D right operand, got {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _matmul_wgrad(a, g):
    if a.shape[:-1] != g.shape[:-1]:
        raise ValueError(f"matmul_wgrad shape mismatch {a.shape}, {g.shape}")
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


_register("matmul", _matmul,
          lambda n, g: (matmul(g, transpose(n.parents[1])),
                        matmul_wgrad(n.parents[0], g)))
_register("matmul_wgrad", _matmul_wgrad,
          lambda n, g: (matmul(n.parents[1], transpose(g)),
                        matmul(n.parents[0], g)))


# --- elementwise nonlinearities ---------------------------------------------

def exp(x):
    return _make("exp", x)


def log(x):
    return _make("log", x)


def tanh(x):
    return _make("tanh", x)


def sqrt(x):
    return _make("sqrt", x)


def relu(x):
    return _make("relu", x)


def step(x):
    """Indicator ``x > 0``; treated as a constant by differentiation."""
    return _make("step", x)


def maximum(a, b):
    return _make("maximum", a, b)


def ge(a, b):
    """Indicator ``a >= b``; treated as a constant by differentiation."""
    return _make("ge", a, b)


def _log(x):
    if (x < 0).any():
        raise ValueError("log of a negative value")
    # log(0) = -inf is left to the finiteness check
    with np.errstate(divide="ignore"):
        return np.log(x)


def _sqrt(x):
    if (x < 0).any():
        raise ValueError("sqrt of a negative value")
    return np.sqrt(x)


_register("exp", np.exp, lambda n, g: (mul(g, n),))
_register("log", _log, lambda n, g: (div(g, n.parents[0]),))
_register("tanh", np.tanh, lambda n, g: (mul(g, sub(n.graph.constant(1.0), mul(n, n))),))
# d sqrt(x) = 1 / (2 sqrt(x)); infinite at 0, which the finiteness check reports
_register("sqrt", _sqrt, lambda n, g: (div(mul(g, n.graph.constant(0.5)), n),))
_register("relu", lambda x: np.maximum(x, 0.0),
          lambda n, g: (mul(g, step(n.parents[0])),))
_register("step", lambda x: (x > 0).astype(np.float64), _none)
_register("ge", lambda a, b: (a >= b).astype(np.float64), _none)


def _maximum_vjp(n, g):
    a, b = n.parents
    m = ge(a, b)
    return (sum_like(mul(g, m), a),
            sum_like(mul(g, sub(n.graph.constant(1.0), m)), b))


_register("maximum", np.maximum, _maximum_vjp)


# --- softmax and fused cross-entropy ----------------------------------------

def softmax(x):
    """Softmax over the last axis."""
    return _make("softmax", x)


def softmax_xent(logits, onehot):
    """Per-row ``-sum(onehot * log_softmax(logits))``, computed stably.

    Labels are treated as constants.
    """
    return _make("softmax_xent", logits, onehot)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(n, g):
    inner = sum(mul(g, n), axis=-1, keepdims=True)
    return (mul(n, sub(g, inner)),)


def _xent(logits, onehot):
    if logits.shape != onehot.shape:
        raise ValueError(f"logits {logits.shape} vs labels {onehot.shape}")
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1))
    return lse - (onehot * shifted).sum(axis=-1)


def _xent_vjp(n, g):
    logits, onehot = n.parents
    return (mul(expand_dims(g, -1), sub(softmax(logits), onehot)), None)


_register("softmax", _softmax, _softmax_vjp)
_register("softmax_xent", _xent, _xent_vjp)


# --- convolution and pooling (NHWC) -----------------------------------------

def unfold(x, kh, kw):
    """im2col: ``(N, H, W, C) -> (N, H-kh+1, W-kw+1, kh*kw*C)``."""
    return _make("unfold", x, kh=int(kh), kw=int(kw))


def fold(g, ref, kh, kw):
    """Adjoint of :func:`unfold`: scatter-add patches back to ``ref``'s shape."""
    return _make("fold", g, ref, kh=int(kh), kw=int(kw))


def _unfold(x, kh, kw):
    if x.ndim != 4:
        raise ValueError(f"unfold expects NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if h < kh or w < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    # (N, Ho, Wo, C, kh, kw) -> (N, Ho, Wo, kh, kw, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(n, h - kh + 1, w - kw + 1, kh * kw * c)


def _fold(g, ref, kh, kw):
    n, h, w, c = ref.shape
    ho, wo = h - kh + 1, w - kw + 1
    g6 = g.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(ref.shape)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + ho, j:j + wo, :] += g6[:, :, :, i, j, :]
    return out


_register("unfold", _unfold,
          lambda n, g: (fold(g, n.parents[0], n.attrs["kh"], n.attrs["kw"]),))
_register("fold", _fold,
          lambda n, g: (unfold(g, n.attrs["kh"], n.attrs["kw"]), None))


def conv2d(x, w, kh, kw, padding=0):
    """Unit-stride convolution of NHWC ``x`` with a ``(kh, kw, Cin, Cout)`` kernel.

    Cross-correlation, as in every deep learning framework.  ``padding``
    zero-pads both spatial sides before the valid convolution.
    """
    if padding:
        x = pad(x, [(0, 0), (padding, padding), (padding, padding), (0, 0)])
    cols = unfold(x, kh, kw)
    return matmul(cols, _make("kernel_flat", w, kernel=(int(kh), int(kw))))


def _kernel_flat(w, kernel):
    kh, kw = kernel
    if w.ndim != 4 or w.shape[:2] != (kh, kw):
        raise ValueError(f"kernel shape {w.shape} does not match {kernel}")
    return w.reshape(-1, w.shape[3])


_register("kernel_flat", _kernel_flat,
          lambda n, g: (reshape_like(g, n.parents[0]),))


_POOL_CACHE = threading.local()


def _pool_masks(ref):
    """Four (N, H/2, W/2, C) indicators, one per window offset, marking the
    first maximum of each 2x2 window in row-major order."""
    cache = getattr(_POOL_CACHE, "entries", None)
    if cache is None:
        cache = _POOL_CACHE.entries = []
    for arr, masks in cache:
        if arr is ref:
            return masks
    n, h, w, c = ref.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    parts = [ref[:, a::2, b::2, :] for a in (0, 1) for b in (0, 1)]
    idx = np.argmax(np.stack(parts), axis=0)
    masks = [(idx == k).astype(np.float64) for k in range(4)]
    cache.append((ref, masks))
    # a handful of pool inputs are live per evaluation
    del cache[:-8]
    return masks


def _pool_gather(v, ref):
    masks = _pool_masks(ref)
    out = v[:, 0::2, 0::2, :] * masks[0]
    for k, (a, b) in enumerate(((0, 1), (1, 0), (1, 1)), start=1):
        out += v[:, a::2, b::2, :] * masks[k]
    return out


def _pool_scatter(g, ref):
    masks = _pool_masks(ref)
    out = np.empty(ref.shape)
    for k, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        out[:, a::2, b::2, :] = g * masks[k]
    return out


def maxpool2(x):
    """2x2 max-pool with stride 2 over NHWC input."""
    return _make("maxpool2", x)


def pool_gather(v, ref):
    return _make("pool_gather", v, ref)


def pool_scatter(g, ref):
    return _make("pool_scatter", g, ref)


_register("maxpool2", lambda x: _pool_gather(x, x),
          lambda n, g: (pool_scatter(g, n.parents[0]),))
_register("pool_gather", _pool_gather,
          lambda n, g: (pool_scatter(g, n.parents[1]), None))
_register("pool_scatter", _pool_scatter,
          lambda n, g: (pool_gather(g, n.parents[1]), None))


def dropout(x, mask):
    """Multiply by a pre-scaled keep mask fed as a placeholder."""
    return mul(x, mask)


def square(x):
    return mul(x, x)


def as_node(graph, value):
    return value if isinstance(value, Node) else graph.constant(value)
