"""Average regret of plain SGD on drifting quadratic bowls against the
gradient-norm-weighted bound, for a constant and a decaying step size.

    python3 demos/regret_bound.py
"""

import math

from qatlab.trainer import regret_bound_check, run_convex_sgd

for label, lr in (("constant 0.1", 0.1), ("0.5/sqrt(t)", lambda t: 0.5 / math.sqrt(t))):
    reports = [regret_bound_check(run_convex_sgd(seed, lr=lr)) for seed in range(20)]
    worst = min(reports, key=lambda r: r["slack"])
    print(f"{label:13s} bound held {sum(r['holds'] for r in reports)}/20, tightest: "
          f"regret {worst['empirical']:.3f} <= bound {worst['bound']:.3f} (D_inf proxy {worst['d_inf']:.2f})")
