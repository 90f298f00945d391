"""Append-only computation graph with lazy evaluation.

Nodes are created by the functions in :mod:`jacshield.autodiff.ops`; nothing
is computed until :func:`evaluate` is called with values for the placeholder
leaves.  Because every backward rule is itself written with graph ops, the
nodes returned by :func:`gradient` can be differentiated again.
"""

from __future__ import annotations

import numpy as np

# Ops that only rearrange, select or mask their inputs; they cannot turn finite
# values into non-finite ones, so the finiteness check is skipped for them.
_STRUCTURAL = frozenset({
    "reshape", "reshape_like", "transpose", "expand_dims", "slice", "unslice",
    "pad", "unfold", "fold", "pool_gather", "pool_scatter", "broadcast_like",
    "sum_like", "step", "ge", "zeros_like", "relu", "neg",
})


class GraphError(ValueError):
    """Raised for malformed graphs: unbound leaves, shape errors, bad targets."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Node:
    """Handle to one entry of a :class:`Graph`.

    Arithmetic operators build new nodes in the same graph.  Python scalars
    and arrays on either side are lifted to constants.
    """

    __slots__ = ("graph", "id", "op", "parents", "attrs", "name")

    def __init__(self, graph, id, op, parents, attrs, name=None):
        self.graph = graph
        self.id = id
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label}>"

    def __hash__(self):
        return hash((id(self.graph), self.id))

    def __eq__(self, other):
        return self is other

    @property
    def is_leaf(self):
        return self.op in ("placeholder", "constant")

    # operator sugar -------------------------------------------------------
    def _lift(self, other):
        if isinstance(other, Node):
            if other.graph is not self.graph:
                raise GraphError("nodes belong to different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        from . import ops
        return ops.add(self, self._lift(other))

    def __radd__(self, other):
        from . import ops
        return ops.add(self._lift(other), self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, self._lift(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(self._lift(other), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, self._lift(other))

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self._lift(other), self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, self._lift(other))

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(self._lift(other), self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, self._lift(other))


class Graph:
    """Append-only list of nodes; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._constants: dict[int, np.ndarray] = {}
        self._plans: dict[tuple, list[int]] = {}

    def __len__(self):
        return len(self.nodes)

    def add_node(self, op, parents=(), attrs=None, name=None):
        for p in parents:
            if p.graph is not self:
                raise GraphError("parent belongs to a different graph")
        node = Node(self, len(self.nodes), op, tuple(parents), attrs or {}, name)
        self.nodes.append(node)
        return node

    def placeholder(self, name=None):
        """A leaf whose value is supplied at evaluation time."""
        return self.add_node("placeholder", name=name)

    def constant(self, value, name=None):
        arr = np.array(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("constant contains non-finite values")
        arr.setflags(write=False)
        node = self.add_node("constant", name=name)
        self._constants[node.id] = arr
        return node

    def _plan(self, outputs):
        key = tuple(sorted({o.id for o in outputs}))
        plan = self._plans.get(key)
        if plan is None:
            seen = set()
            stack = list(key)
            while stack:
                i = stack.pop()
                if i in seen:
                    continue
                seen.add(i)
                stack.extend(p.id for p in self.nodes[i].parents)
            plan = sorted(seen)
            self._plans[key] = plan
        return plan


def _bind(graph, feed):
    bound = {}
    for k, v in (feed or {}).items():
        if isinstance(k, Node):
            if k.graph is not graph:
                raise GraphError(f"{k!r} is not in this graph")
            if k.op != "placeholder":
                raise GraphError(f"{k!r} is not a placeholder")
            idx = k.id
        else:
            raise GraphError(f"feed keys must be placeholder nodes, got {k!r}")
        arr = np.asarray(v, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"value fed to {k!r} is not finite")
        bound[idx] = arr
    return bound


def evaluate(graph, outputs, feed=None):
    """Compute ``outputs`` given placeholder values in ``feed``.

    Every ancestor of the requested nodes is computed once, in id order, and
    the result maps each requested node to its value.  A single :class:`Node`
    may be passed instead of a list, in which case its value is returned
    directly.
    """
    from .ops import OPS

    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    bound = _bind(graph, feed)
    values: dict[int, np.ndarray] = {}
    for i in graph._plan(outs):
        node = graph.nodes[i]
        if node.op == "placeholder":
            if i not in bound:
                label = node.name or f"#{i}"
                raise GraphError(f"placeholder {label} is unbound")
            values[i] = bound[i]
            continue
        if node.op == "constant":
            values[i] = graph._constants[i]
            continue
        args = [values[p.id] for p in node.parents]
        try:
            out = OPS[node.op].forward(*args, **node.attrs)
        except (ValueError, IndexError) as exc:
            raise GraphError(f"{node!r}: {exc}") from exc
        if node.op not in _STRUCTURAL and not np.isfinite(out).all():
            raise NonFiniteError(f"{node!r} produced non-finite values")
        values[i] = out
    if single:
        return values[outs[0].id]
    return {o: values[o.id] for o in outs}


def _ancestors(nodes):
    seen = set()
    stack = [n.id for n in nodes]
    graph = nodes[0].graph
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        stack.extend(p.id for p in graph.nodes[i].parents)
    return seen


def gradient(scalar, wrt):
    """Return nodes computing d(scalar)/d(each node in ``wrt``).

    The target must evaluate to a single element; this is checked when the
    gradient is evaluated.  Nodes in ``wrt`` that ``scalar`` does not depend
    on get a zero gradient of their own shape rather than an error.  The
    returned nodes live in the same graph and may be passed to ``gradient``
    again for second derivatives.
    """
    from . import ops
    from .ops import OPS

    single = isinstance(wrt, Node)
    wrt = [wrt] if single else list(wrt)
    graph = scalar.graph
    up = _ancestors([scalar])
    targets = {w.id for w in wrt}
    # nodes on some path from a wrt node to the scalar
    live = set()
    for i in sorted(up):
        node = graph.nodes[i]
        if i in targets or any(p.id in live for p in node.parents):
            live.add(i)

    pending: dict[int, list[Node]] = {scalar.id: [ops.scalar_seed(scalar)]}
    done: dict[int, Node] = {}
    for i in sorted(live, reverse=True):
        parts = pending.pop(i, None)
        if not parts:
            continue
        g = parts[0]
        for extra in parts[1:]:
            g = ops.add(g, extra)
        done[i] = g
        node = graph.nodes[i]
        if node.is_leaf:
            continue
        grads = OPS[node.op].vjp(node, g)
        for parent, pg in zip(node.parents, grads):
            if pg is not None and parent.id in live:
                pending.setdefault(parent.id, []).append(pg)

    result = [done[w.id] if w.id in done else ops.zeros_like(w) for w in wrt]
    return result[0] if single else result
