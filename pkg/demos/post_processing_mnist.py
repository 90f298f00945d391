"""
Jacobian post-processing on an MNIST subset
===========================================

Train a small conv net normally, then keep training with the Frobenius
penalty on the input Jacobian, and compare against spending the same
epochs on plain cross-entropy. Takes several minutes on one core.
"""

import numpy as np

from jacshield import data_io
from jacshield import network as nw
from jacshield import robustness as rb
from jacshield import trainer as tr
from jacshield.attacks import AttackConfig
from jacshield.regularizers import LossConfig

train, test = data_io.train_test_split(data_io.mnist_subset(), 2000, 1000, seed=0)

opt = tr.OptimizerConfig(rate=1e-3)
base = tr.TrainConfig(opt, batch_size=50, epochs_phase1=8, epochs_phase2=5, seed=0)
net1, _ = tr.train_phase(nw.mnist_small(0), train, test, base)

plain, _ = tr.post_process(net1, train, base)
reg_cfg = tr.TrainConfig(opt, batch_size=50, epochs_phase2=5, seed=0,
                         loss=LossConfig(0.1, "jacobian", per_sample_sqrt=True,
                                         jacobian_mode="eval"))
reg, _ = tr.post_process(net1, train, reg_cfg)

sub = test.take(np.arange(300))
eps = [0.0, 0.05, 0.1, 0.15, 0.2]
for name, net in (("plain", plain), ("jacobian", reg)):
    acc = np.mean(nw.predict(net, test.x) == test.y)
    jf = rb.avg_jacobian_frobenius(net, test.x[:200])
    rho = rb.rho_adv(net, sub).rho_adv
    curve = rb.accuracy_under_attack(net, sub, AttackConfig("fgsm"), eps)
    print(f"{name:9s} acc {acc:.3f}  ||J|| {jf:.2f}  rho {rho:.4f}")
    print("   fgsm", [round(a, 3) for _, a in curve])
