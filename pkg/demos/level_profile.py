"""Per-level phase times, interface sizes and aspect ratios of one factorization.

    python3 demos/level_profile.py [dim] [n] [alpha]
"""

import sys
import warnings

from spaqr import InvPoiSpec, SolverConfig, factorize
from spaqr.problems import gen_invpoi

dim = int(sys.argv[1]) if len(sys.argv) > 1 else 3
n = int(sys.argv[2]) if len(sys.argv) > 2 else 16
alpha = float(sys.argv[3]) if len(sys.argv) > 3 else 2.0
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    p = gen_invpoi(InvPoiSpec(dim=dim, n=n, target_alpha=alpha))
F = factorize(p.A, SolverConfig(eps=1e-2), coords=p.coords.cols)

print(f"{dim}D n={n}: {p.A.shape[0]} x {p.A.shape[1]}, alpha {p.alpha:.3f}, "
      f"factor {F.timings['factor']:.2f}s, nnz(W) {F.nnz_w}, top separator {F.top_separator}")
print(f"{'level':>5} {'sparsified':>10} {'fronts':>6} {'median size':>11} {'median r/c':>10}  phase times (s)")
for st in F.stats:
    times = " ".join(f"{k}={v:.3f}" for k, v in st["times"].items())
    aspect = st.get("aspect_step2", st["aspect_after"])[2]
    print(f"{st['level']:>5} {str(st['sparsified']):>10} {st['fronts_after']:>6} "
          f"{st['interface_sizes'][2]:>11.0f} {aspect:>10.2f}  {times}")
