"""Jacobian regularization as a post-processing defense against adversarial examples.

Subpackages and modules:

* :mod:`jacshield.autodiff`: lazy reverse-mode autodiff with higher-order gradients
* :mod:`jacshield.network`: layers, architectures, Jacobians, checkpoints
* :mod:`jacshield.regularizers`: cross-entropy plus Jacobian-style penalties
* :mod:`jacshield.attacks`: FGSM, DeepFool, JSMA
* :mod:`jacshield.robustness`: rho_adv, distance bounds, diagnostics
* :mod:`jacshield.trainer`: two-phase training and adversarial mixing
* :mod:`jacshield.data_io`: MNIST IDX, CIFAR-10 and synthetic datasets
* :mod:`jacshield.cli`: the ``jacshield`` command
"""

__version__ = "0.1.0"
