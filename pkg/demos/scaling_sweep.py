"""Sweep problem sizes and fit log-log exponents against N.

    python3 demos/scaling_sweep.py invpoi2d 32 64 128
    python3 demos/scaling_sweep.py invpoi3d 8 12 16
"""

import sys

from spaqr.cli import bench_exponents, bench_rows

problem = sys.argv[1] if len(sys.argv) > 1 else "invpoi2d"
sizes = [int(s) for s in sys.argv[2:]] or [32, 64, 128]
rows = bench_rows(problem, sizes, eps=1e-2)
print(f"{'n':>4} {'N':>8} {'t_F':>8} {'iters':>5} {'nnz(W)':>10} {'top cols':>8}")
for r in rows:
    print(f"{r['n']:>4} {r['N']:>8} {r['t_F']:>8.2f} {r['iterations']:>5} {r['nnz_w']:>10} {r['top_cols']:>8}")
for k, v in bench_exponents(rows).items():
    print(f"exponent vs N, {k}: {v:.3f}")
