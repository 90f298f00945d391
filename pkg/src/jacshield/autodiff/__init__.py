"""Reverse-mode automatic differentiation with differentiable gradients."""

from . import ops
from .gradcheck import GradCheckReport, check_gradient, numeric_gradient, relative_error
from .graph import Graph, GraphError, Node, NonFiniteError, evaluate, gradient

__all__ = [
    "Graph", "GraphError", "Node", "NonFiniteError", "evaluate", "gradient",
    "check_gradient", "numeric_gradient", "relative_error", "GradCheckReport",
    "ops",
]
