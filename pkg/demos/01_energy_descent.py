"""Energy descent on a small ReLU classifier.

A perturbed input sits in a high-energy region.  A few projected steps on the
energy pull it back toward a confident prediction while never leaving the
budget ball around the input it was given.
"""
import numpy as np

from et3 import DefenseConfig, TwoLayerReluNet, energy, et3, norm_of

rng = np.random.default_rng(0)
net = TwoLayerReluNet(rng.standard_normal((16, 4)), rng.standard_normal(16), rng.standard_normal((3, 16)))

x = rng.standard_normal(4)
print("logits at x      ", np.round(net.forward(x), 3))
print("energy at x      ", round(float(energy(net.forward(x))), 4))

for norm in ("l2", "linf"):
    cfg = DefenseConfig(epsilon=0.5, alpha=0.2, steps=5, norm=norm)
    res = et3(net, x, cfg)
    print(f"\n{norm} budget {cfg.epsilon}, {cfg.steps} steps")
    print("  energy trace   ", np.round(res.energy_trace, 4))
    print("  displacement   ", round(float(norm_of(res.x_p - x, norm)), 4))
    print("  logits after   ", np.round(net.forward(res.x_p), 3))
