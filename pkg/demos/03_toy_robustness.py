"""Paired base vs defended evaluation on the adversarially trained toy net.

Both runs share one set of cached adversaries.  The defended run descends the
energy of a cosine head over the fine-grained concept centers (the proxy
label set), then classifies with the coarse evaluation head.
"""
import sys
import tempfile
from pathlib import Path

from et3 import bundled_config, compare, parse_spec, run_experiment

norm = sys.argv[1] if len(sys.argv) > 1 else "l2"
root = Path(tempfile.mkdtemp(prefix="et3_toy_"))
reports = {}
for kind in ("base", "et3"):
    doc = bundled_config(f"toy_{kind}_{norm}")
    doc["outputs"], doc["cache"] = str(root / kind), str(root / "cache")
    reports[kind] = run_experiment(parse_spec(doc)).report
    r = reports[kind]
    print(f"{kind:5s} clean {r.clean_acc:.3f}  " + "  ".join(f"{k} {v:.3f}" for k, v in r.robust_acc.items()))

print("\nmetric                      base     et3    delta")
for metric, a, b, delta in compare(reports["base"], reports["et3"]):
    print(f"{metric:24s} {a:8.3f} {b:8.3f} {delta:+8.3f}")
print(f"\nreports written under {root}")
