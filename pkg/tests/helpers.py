"""Shared builders for tests: random tiny graphs and small networks."""

import numpy as np

from jacshield import network as nw
from jacshield.autodiff import Graph, gradient, ops

ACTIVATIONS = ("tanh", "relu", "softplus", "softsqrt", "expdamp", "square")


def _act(name, h):
    if name == "tanh":
        return ops.tanh(h)
    if name == "relu":
        return ops.relu(h)
    if name == "softplus":
        return ops.log(ops.exp(h) + 1.0)
    if name == "softsqrt":
        return ops.sqrt(ops.square(h) + 1.0)
    if name == "expdamp":
        return ops.exp(h * 0.3)
    return ops.square(h) * 0.5


class RandomGraph:
    """A random scalar function f(x, W_1..W_L) with 1 to 4 layers.

    ``second`` is ``sum(grad_x f ** 2)``, a second-order expression whose
    gradients w.r.t. x and W_1 involve differentiating a gradient.
    """

    def __init__(self, seed):
        rng = np.random.default_rng(seed)
        self.g = g = Graph()
        self.kind = "conv" if rng.random() < 0.25 else "dense"
        n = int(rng.integers(1, 4))
        self.feed = {}
        self.weights = []
        if self.kind == "conv":
            self.x = g.placeholder("x")
            self.feed[self.x] = rng.normal(size=(n, 4, 4, 1))
            wc = g.placeholder("Wc")
            self.feed[wc] = rng.normal(size=(3, 3, 1, 2)) * 0.5
            self.weights.append(wc)
            h = ops.conv2d(self.x, wc, 3, 3, padding=1)
            h = _act(rng.choice(("tanh", "relu", "softplus")), h)
            h = ops.maxpool2(h)
            h = ops.reshape(h, (-1, 8))
            width = 8
            depth = int(rng.integers(1, 3))
        else:
            width = int(rng.integers(2, 5))
            self.x = g.placeholder("x")
            self.feed[self.x] = rng.normal(size=(n, width))
            h = self.x
            depth = int(rng.integers(1, 5))
        for layer in range(depth):
            out = int(rng.integers(2, 5))
            w = g.placeholder(f"W{layer}")
            b = g.placeholder(f"b{layer}")
            self.feed[w] = rng.normal(size=(width, out)) / np.sqrt(width)
            self.feed[b] = rng.normal(size=out) * 0.1
            self.weights.append(w)
            h = ops.matmul(h, w) + b
            if layer < depth - 1:
                h = _act(rng.choice(ACTIVATIONS), h)
            width = out
        head = rng.choice(("xent", "linear", "maximum"))
        if head == "xent":
            labels = rng.integers(0, width, size=n)
            y = g.constant(np.eye(width)[labels])
            self.f = ops.sum(ops.softmax_xent(h, y))
        elif head == "linear":
            self.f = ops.sum(h * g.constant(rng.normal(size=width)))
        else:
            self.f = ops.sum(ops.maximum(h, g.constant(rng.normal(size=width) * 0.1)))
        self.second = ops.sum(ops.square(gradient(self.f, self.x)))


def two_layer_relu(seed=0, d=3, hidden=5, k=3):
    return nw.init_network([nw.dense(d, hidden), nw.relu(), nw.dense(hidden, k)], (d,), seed)


def random_net(rng, relu=True):
    """Small random MLP with 1-3 dense layers and random widths."""
    d = int(rng.integers(2, 6))
    k = int(rng.integers(2, 5))
    layers = []
    width = d
    for _ in range(int(rng.integers(0, 3))):
        h = int(rng.integers(2, 7))
        layers += [nw.dense(width, h), nw.relu() if relu else nw.tanh()]
        width = h
    layers.append(nw.dense(width, k))
    net = nw.init_network(layers, (d,), int(rng.integers(1 << 30)))
    for i in net.param_layers():
        net.layers[i].bias = rng.normal(size=net.layers[i].bias.shape) * 0.1
    return net


LINEAR_W = np.array([[1.0, 0.0], [0.0, -1.0]])


def linear():
    return nw.linear_net(LINEAR_W)
