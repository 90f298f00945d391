"""
FGSM, DeepFool and JSMA on toy data
===================================

"""

import numpy as np

from jacshield import network as nw
from jacshield import trainer as tr
from jacshield.attacks import AttackConfig, run_attack
from jacshield.data_io import synth_gaussians

data = synth_gaussians(3, 6, 100, spread=0.08, seed=0)
cfg = tr.TrainConfig(tr.OptimizerConfig(rate=1e-2), batch_size=20, epochs_phase1=20, seed=0)
net, hist = tr.train_phase(nw.tiny_mlp(6, 3, seed=0), data, data, cfg)
print("train accuracy", hist.records[-1].test_accuracy)

x, y = data.x[:20], data.y[:20]

for attack in (AttackConfig("fgsm", epsilon=0.1),
               AttackConfig("deepfool"),
               AttackConfig("jsma", epsilon=0.3, epochs=3)):
    outs = run_attack(net, x, y, attack)
    ok = np.mean([o.success for o in outs])
    print(f"{attack.kind:9s} success {ok:.2f}  "
          f"mean l2 {np.mean([o.l2 for o in outs]):.4f}  "
          f"max linf {max(o.linf for o in outs):.3f}  max l0 {max(o.l0 for o in outs)}")

# deepfool keeps the step before the overshoot too
o = run_attack(net, x[:1], y[:1], AttackConfig("deepfool"))[0]
print(o.iterations, "iterations,", o.pre_overshoot_l2, "->", o.l2)
