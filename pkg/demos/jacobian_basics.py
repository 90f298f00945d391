"""
Jacobians, fooling bounds and curvature on a small network
===========================================================

A two-layer relu net on 3 inputs. Everything here is exact, no training.
"""

import numpy as np

from jacshield import network as nw
from jacshield import robustness as rb

net = nw.init_network([nw.dense(3, 8), nw.relu(), nw.dense(8, 4)], (3,), seed=0)
x = np.array([0.2, -0.5, 0.9])

# K x D matrix of d logits / d input, one backward pass per logit
J = nw.jacobian(net, x).rows
print("jacobian shape", J.shape)
print("||J||_F =", np.linalg.norm(J))

# same thing for a linear net is just the weight matrix, transposed
W = np.array([[1.0, 0.0], [0.0, -1.0]])
print(nw.jacobian(nw.linear_net(W), np.ones(2)).rows)

# distance estimates to the nearest decision boundary
rep = rb.fooling_bounds(net, x)
print("d_prop3 =", rep.d_prop3, " d_cor2 =", rep.d_cor2)
assert not rb.chain_violated(rep)

# with an orthonormal frozen last layer the penultimate bound exists too
frozen = nw.freeze_orthonormal(nw.init_network([nw.dense(3, 8), nw.relu(), nw.dense(8, 4)],
                                               (3,), seed=0), 2, seed=1)
rep = rb.fooling_bounds(frozen, x)
print("d_prop4 =", rep.d_prop4, "<= d_cor2 =", rep.d_cor2)

# curvature of the boundary between classes 0 and 1 at x
print(rb.curvature_diagnostics(net, x, 0, 1))

# mean value check along a segment: ||f(x')-f(x)|| / ||x'-x|| <= max ||J|| on the segment
print(rb.mvt_diagnostic(net, x, x + np.array([0.3, 0.1, -0.2])))
