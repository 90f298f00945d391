"""Feed-forward classifiers, per-layer taps and input Jacobians.

Networks are plain data: a list of :class:`Layer` records plus the
per-sample input shape.  The computation graph for a given architecture is
built once and cached; weights are fed as placeholder values on every call,
so trained and untrained networks of the same shape share one graph.

Images are NHWC.  A dense layer placed after image-shaped activations
flattens them first.  ``z = x @ W + b`` with ``W`` of shape ``(in, out)``.
"""

from __future__ import annotations

import copy
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, evaluate, gradient, ops

KINDS = ("dense", "conv", "maxpool", "relu", "tanh", "dropout")
TAPS = ("L", "L-1", "L-2")


@dataclass
class Layer:
    kind: str
    dims: tuple = ()
    keep_prob: float | None = None
    padding: int = 0
    frozen: bool = False
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if (self.keep_prob is not None) != (self.kind == "dropout"):
            raise ValueError("keep_prob is required for dropout layers and only for them")
        if self.kind == "dropout" and not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.kind == "dense" and len(self.dims) != 2:
            raise ValueError("dense dims are (in, out)")
        if self.kind == "conv" and len(self.dims) != 4:
            raise ValueError("conv dims are (kh, kw, in, out)")

    @property
    def has_params(self):
        return self.kind in ("dense", "conv")


def dense(n_in, n_out, frozen=False):
    return Layer("dense", (n_in, n_out), frozen=frozen)


def conv(kh, kw, c_in, c_out, padding=0):
    return Layer("conv", (kh, kw, c_in, c_out), padding=padding)


def maxpool():
    return Layer("maxpool")


def relu():
    return Layer("relu")


def tanh():
    return Layer("tanh")


def dropout(keep_prob):
    return Layer("dropout", keep_prob=keep_prob)


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple
    rng_seed: int = 0
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.shapes = _infer_shapes(self.layers, self.input_shape)

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))

    @property
    def output_dim(self):
        return self.layers[self.dense_indices()[-1]].dims[1]

    def dense_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "dense"]

    def param_layers(self):
        return [i for i, l in enumerate(self.layers) if l.has_params]

    def copy(self):
        return copy.deepcopy(self)

    def signature(self):
        """Hashable description of the architecture (no weights)."""
        return (self.input_shape,) + tuple(
            (l.kind, l.dims, l.keep_prob, l.padding) for l in self.layers)


def _infer_shapes(layers, input_shape):
    shape = input_shape
    out = []
    last = None
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            flat = int(np.prod(shape))
            if flat != layer.dims[0]:
                raise ValueError(f"layer {i}: dense expects {layer.dims[0]} inputs, gets {flat}")
            shape = (layer.dims[1],)
            last = i
        elif layer.kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv needs (H, W, C) input, gets {shape}")
            kh, kw, c_in, c_out = layer.dims
            h, w, c = shape
            if c != c_in:
                raise ValueError(f"layer {i}: conv expects {c_in} channels, gets {c}")
            h, w = h + 2 * layer.padding - kh + 1, w + 2 * layer.padding - kw + 1
            if h < 1 or w < 1:
                raise ValueError(f"layer {i}: kernel larger than input")
            shape = (h, w, c_out)
        elif layer.kind == "maxpool":
            if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                raise ValueError(f"layer {i}: maxpool needs even (H, W, C) input, gets {shape}")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        out.append(shape)
    if last is None:
        raise ValueError("network needs a final dense layer")
    if last != len(layers) - 1:
        raise ValueError("the final dense layer must be last; softmax lives in the loss")
    return out


def init_network(layers, input_shape, seed=0, rng_seed=None):
    """Gaussian init with variance 2/fan_in before a relu, 1/fan_in otherwise.

    Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    layers = [copy.deepcopy(l) for l in layers]
    for i, layer in enumerate(layers):
        if not layer.has_params:
            continue
        nxt = next((l.kind for l in layers[i + 1:] if l.kind not in ("dropout", "maxpool")), None)
        if layer.kind == "dense":
            fan_in, shape = layer.dims[0], layer.dims
            n_out = layer.dims[1]
        else:
            kh, kw, c_in, n_out = layer.dims
            fan_in, shape = kh * kw * c_in, layer.dims
        var = (2.0 if nxt == "relu" else 1.0) / fan_in
        layer.weight = rng.normal(0.0, np.sqrt(var), size=shape)
        layer.bias = np.zeros(n_out)
    return Network(layers, input_shape, seed if rng_seed is None else rng_seed)


def tiny_mlp(d, k, seed=0, hidden=32):
    return init_network([dense(d, hidden), tanh(), dense(hidden, k)], (d,), seed)


def linear_net(weight, bias=None):
    """Single dense layer ``z = x @ W + b``; ``weight`` is (in, out)."""
    weight = np.asarray(weight, dtype=np.float64)
    layer = dense(*weight.shape)
    layer.weight = weight.copy()
    layer.bias = np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, float).copy()
    return Network([layer], (weight.shape[0],))


def mnist_net(seed=0):
    """Two 5x5 conv+relu+pool stages (32, 64 maps), dense 1024 with dropout 0.5, dense 10."""
    layers = [
        conv(5, 5, 1, 32, padding=2), relu(), maxpool(),
        conv(5, 5, 32, 64, padding=2), relu(), maxpool(),
        dense(7 * 7 * 64, 1024), relu(), dropout(0.5),
        dense(1024, 10),
    ]
    return init_network(layers, (28, 28, 1), seed)


def mnist_small(seed=0, maps=(8, 16), hidden=64):
    """Desk-scale version of :func:`mnist_net` with the same layer pattern."""
    a, b = maps
    layers = [
        conv(5, 5, 1, a, padding=2), relu(), maxpool(),
        conv(5, 5, a, b, padding=2), relu(), maxpool(),
        dense(7 * 7 * b, hidden), relu(), dropout(0.5),
        dense(hidden, 10),
    ]
    return init_network(layers, (28, 28, 1), seed)


def cifar_net(seed=0, k=10, maps=(32, 64, 128, 128), hidden=512):
    """Four (conv, conv, pool, dropout 0.75) blocks followed by two dense layers."""
    layers = []
    c = 3
    for m in maps:
        layers += [conv(3, 3, c, m, padding=1), relu(), conv(3, 3, m, m, padding=1), relu(),
                   maxpool(), dropout(0.75)]
        c = m
    side = 32 // 2 ** len(maps)
    layers += [dense(side * side * c, hidden), relu(), dense(hidden, k)]
    return init_network(layers, (32, 32, 3), seed)


ARCHITECTURES = {
    "mnist": mnist_net,
    "mnist-small": mnist_small,
    "cifar": cifar_net,
}


# --- graph construction ----------------------------------------------------

class NetGraph:
    """Forward graph of one architecture in one mode, with placeholders."""

    def __init__(self, net, mode):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.graph = Graph()
        self.x = self.graph.placeholder("x")
        self.params = {}
        self.masks = {}
        for i in net.param_layers():
            self.params[i] = (self.graph.placeholder(f"W{i}"), self.graph.placeholder(f"b{i}"))
        if mode == "train":
            for i, l in enumerate(net.layers):
                if l.kind == "dropout":
                    self.masks[i] = self.graph.placeholder(f"mask{i}")
        self.logits, self.taps = self.build(net, self.x)
        self._rows = {}
        self._extras = {}
        self._lock = threading.Lock()

    def extra(self, key, builder):
        """Memoised extra nodes, built once by ``builder(self)``."""
        with self._lock:
            if key not in self._extras:
                self._extras[key] = builder(self)
            return self._extras[key]

    def build(self, net, x, masks=None):
        """Append the network to the graph on input ``x``; returns (logits, taps)."""
        masks = self.masks if masks is None else masks
        h = x
        dense_inputs = []
        for i, layer in enumerate(net.layers):
            if layer.kind == "dense":
                flat = ops.reshape(h, (-1, layer.dims[0]))
                dense_inputs.append(flat)
                w, b = self.params[i]
                h = ops.matmul(flat, w) + b
            elif layer.kind == "conv":
                w, b = self.params[i]
                kh, kw = layer.dims[:2]
                h = ops.conv2d(h, w, kh, kw, layer.padding) + b
            elif layer.kind == "maxpool":
                h = ops.maxpool2(h)
            elif layer.kind == "relu":
                h = ops.relu(h)
            elif layer.kind == "tanh":
                h = ops.tanh(h)
            elif layer.kind == "dropout" and i in masks:
                h = ops.dropout(h, masks[i])
        taps = {"L": h}
        if len(dense_inputs) >= 1:
            taps["L-1"] = dense_inputs[-1]
        if len(dense_inputs) >= 2:
            taps["L-2"] = dense_inputs[-2]
        return h, taps

    def row_nodes(self, layer, width):
        """Gradient nodes of each unit of tap ``layer`` w.r.t. the input batch."""
        with self._lock:
            if layer not in self._rows:
                z = self.taps[layer]
                self._rows[layer] = [gradient(ops.sum(ops.take(z, k, axis=1)), self.x)
                                     for k in range(width)]
        return self._rows[layer]

    def feed(self, net, x, masks=None):
        out = {self.x: x}
        for i, (w, b) in self.params.items():
            out[w] = net.layers[i].weight
            out[b] = net.layers[i].bias
        for i, node in self.masks.items():
            if masks is None or i not in masks:
                raise ValueError(f"train mode needs a dropout mask for layer {i}")
            out[node] = masks[i]
        return out


_GRAPH_LOCK = threading.Lock()
_GRAPHS: dict = {}


def compiled(net, mode="eval"):
    """Cached :class:`NetGraph` for ``net``'s architecture and ``mode``."""
    key = (net.signature(), mode)
    with _GRAPH_LOCK:
        if key not in _GRAPHS:
            _GRAPHS[key] = NetGraph(net, mode)
        return _GRAPHS[key]


def draw_masks(net, batch_size, step=0):
    """Dropout keep masks (pre-scaled by 1/keep) from ``(net.rng_seed, step)``.

    ``step`` may be an int or a tuple of ints such as (phase, epoch, batch).
    """
    step = tuple(int(s) for s in np.atleast_1d(step))
    rng = np.random.default_rng([int(net.rng_seed), *step])
    masks = {}
    for i, layer in enumerate(net.layers):
        if layer.kind != "dropout":
            continue
        shape = (batch_size,) + tuple(net.shapes[i - 1] if i else net.input_shape)
        masks[i] = (rng.random(shape) < layer.keep_prob) / layer.keep_prob
    return masks


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], True
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {x.shape} does not match {net.input_shape}")
    return x, False


@dataclass
class ForwardResult:
    logits: np.ndarray
    taps: dict
    masks: dict | None


def forward(net, x, mode="eval", step=0, masks=None):
    """Logits and the L-1 / L-2 taps for a sample or a batch.

    In train mode dropout masks are drawn from ``(net.rng_seed, step)``
    unless given, and returned for reuse.
    """
    xb, single = _as_batch(net, x)
    g = compiled(net, mode)
    if mode == "train" and masks is None:
        masks = draw_masks(net, len(xb), step)
    nodes = [g.logits] + [g.taps[k] for k in TAPS if k in g.taps]
    vals = evaluate(g.graph, nodes, g.feed(net, xb, masks))
    taps = {k: vals[g.taps[k]] for k in TAPS if k in g.taps}
    logits = vals[g.logits]
    if single:
        logits = logits[0]
        taps = {k: v[0] for k, v in taps.items()}
    return ForwardResult(logits, taps, masks if mode == "train" else None)


def logits(net, x, batch_size=256):
    """Eval-mode logits for a batch, chunked to bound memory."""
    xb, single = _as_batch(net, x)
    g = compiled(net, "eval")
    out = [evaluate(g.graph, g.logits, g.feed(net, xb[i:i + batch_size]))
           for i in range(0, len(xb), batch_size)]
    res = np.concatenate(out) if out else np.zeros((0, net.output_dim))
    return res[0] if single else res


def predict(net, x, batch_size=256):
    """Arg-max class; ties go to the lowest index."""
    return np.argmax(logits(net, x, batch_size), axis=-1)


def tap_width(net, layer):
    g = compiled(net, "eval")
    if layer not in g.taps:
        raise ValueError(f"layer {layer!r} not available; network has {sorted(g.taps)}")
    if layer == "L":
        return net.output_dim
    dense_ids = net.dense_indices()
    return net.layers[dense_ids[-1 if layer == "L-1" else -2]].dims[0]


@dataclass
class JacobianMatrix:
    rows: np.ndarray  # (M, D)
    layer: str
    sample_id: int | None = None

    @property
    def frobenius_sq(self):
        return float(np.sum(self.rows_norm_sq()))

    @property
    def frobenius(self):
        return float(np.sqrt(self.frobenius_sq))

    def rows_norm_sq(self):
        return np.einsum("md,md->m", self.rows, self.rows)


def jacobian_batch(net, x, layer="L", mode="eval", masks=None, batch_size=128):
    """Per-sample Jacobians of tap ``layer`` w.r.t. the flattened input.

    Returns an array ``(N, M, D)``.  Row ``k`` comes from one backward pass of
    unit ``k`` summed over the batch; samples do not interact, so that sum
    separates into per-sample gradients.
    """
    if layer not in TAPS:
        raise ValueError(f"layer must be one of {TAPS}, got {layer!r}")
    xb, _ = _as_batch(net, x)
    width = tap_width(net, layer)
    g = compiled(net, mode)
    rows = g.row_nodes(layer, width)
    if mode == "train" and masks is None:
        masks = draw_masks(net, len(xb))
    out = np.empty((len(xb), width, net.input_dim))
    for s in range(0, len(xb), batch_size):
        chunk = xb[s:s + batch_size]
        m = None if masks is None else {i: v[s:s + batch_size] for i, v in masks.items()}
        vals = evaluate(g.graph, rows, g.feed(net, chunk, m))
        for k, node in enumerate(rows):
            out[s:s + len(chunk), k] = vals[node].reshape(len(chunk), -1)
    return out


def jacobian(net, x, layer="L", mode="eval", masks=None, sample_id=None):
    """Jacobian of one sample as a :class:`JacobianMatrix`."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ValueError(f"expected one sample of shape {net.input_shape}, got {x.shape}")
    rows = jacobian_batch(net, x[None], layer, mode, masks)[0]
    return JacobianMatrix(rows, layer, sample_id)


def freeze_orthonormal(net, layer, seed=0):
    """Copy of ``net`` whose dense ``layer`` has fixed orthonormal columns.

    The weight is the Q factor of a seeded Gaussian matrix, the bias is zeroed
    and the layer is marked frozen.
    """
    out = net.copy()
    target = out.layers[layer]
    if target.kind != "dense":
        raise ValueError(f"layer {layer} is {target.kind}, not dense")
    n_in, n_out = target.dims
    if n_in < n_out:
        raise ValueError(f"{n_out} orthonormal columns need at least as many rows, got {n_in}")
    a = np.random.default_rng(seed).normal(size=(n_in, n_out))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    target.weight = q
    target.bias = np.zeros(n_out)
    target.frozen = True
    return out


def is_orthonormal(weight, tol=1e-10):
    k = weight.shape[1]
    return bool(np.abs(weight.T @ weight - np.eye(k)).max() <= tol)


# --- checkpoints -------------------------------------------------------------
#
# Little-endian layout:
#   b"JSHD", u32 version, u32 layer count, u64 rng seed,
#   u32 input rank, u32 * rank input shape,
#   per layer: u8 kind tag, u8 frozen, u32 padding, f64 keep_prob (0 if none),
#              u32 rank, u32 * rank dims, then weight and bias as f64 row-major
#              when the layer has parameters.

CHECKPOINT_MAGIC = b"JSHD"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(net):
    out = [CHECKPOINT_MAGIC, struct.pack("<IIQ", CHECKPOINT_VERSION, len(net.layers), net.rng_seed)]
    out.append(struct.pack(f"<I{len(net.input_shape)}I", len(net.input_shape), *net.input_shape))
    for layer in net.layers:
        out.append(struct.pack("<BBId", KINDS.index(layer.kind), layer.frozen, layer.padding,
                               layer.keep_prob or 0.0))
        out.append(struct.pack(f"<I{len(layer.dims)}I", len(layer.dims), *layer.dims))
        if layer.has_params:
            out.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(net, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def array(self, shape):
        n = int(np.prod(shape))
        if self.pos + 8 * n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        arr = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos)
        self.pos += 8 * n
        return arr.astype(np.float64).reshape(shape)


def network_from_bytes(data):
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
    r = _Reader(data)
    r.pos = 4
    version, n_layers, seed = r.take("<IIQ")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (rank,) = r.take("<I")
    input_shape = r.take(f"<{rank}I")
    layers = []
    for _ in range(n_layers):
        tag, frozen, padding, keep = r.take("<BBId")
        if tag >= len(KINDS):
            raise CheckpointError(f"unknown layer tag {tag} at byte {r.pos - 14}")
        (rank,) = r.take("<I")
        dims = r.take(f"<{rank}I")
        kind = KINDS[tag]
        layer = Layer(kind, dims, keep if kind == "dropout" else None, padding, bool(frozen))
        if layer.has_params:
            layer.weight = r.array(dims)
            layer.bias = r.array((dims[-1],))
        layers.append(layer)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after byte {r.pos}")
    return Network(layers, input_shape, seed)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return network_from_bytes(fh.read())
