"""A two-logit linear instance that meets every hypothesis of the one-step
certificate and still ends up misclassified.

The audit draws random instances whose gradient ratio exceeds the required
bound by 5%.  Most are certified; a small fraction are not.  This script
finds the first failure and prints the quantities involved.
"""
import numpy as np

from et3 import check_theorem, random_theorem_instance, theorem_audit

summary = theorem_audit(1000, seed=0, keep_reports=True)
print(f"{summary.instances} instances, {summary.hypotheses_met} with hypotheses met, "
      f"{summary.certified} certified, {summary.violations} violations")

idx = next(i for i, rep in enumerate(summary.reports) if rep.violation)
rng = np.random.default_rng([0, idx])
model, x, y, eps = random_theorem_instance(rng, int(rng.integers(2, 33)))
rep = check_theorem(model, x, y, eps, strict=False)
print(f"\ninstance {idx} (dim {model.dim}):")
for k in ("r_x", "epsilon", "epsilon_min", "C", "C_required", "alpha_star", "step_norm", "post_margin"):
    print(f"  {k:12s} {getattr(rep, k):.6g}")
print("  hypotheses  ", rep.hypotheses_met)

# the step moves the false logit up by more than the bound allows
e = np.exp(model.forward(x) - model.forward(x).max())
e /= e.sum()
g_t, g_f = model.weight[y], model.weight[1 - y]
z = rep.alpha_star * (e[y] * g_t + e[1 - y] * g_f)
print(f"\n  true logit gain  {g_t @ z:.6g}")
print(f"  false logit gain {g_f @ z:.6g}")
print(f"  margin change    {(g_t - g_f) @ z:.6g}  (needs > {-rep.r_x:.6g})")
