"""Factor a 2D inverse Poisson Jacobian and compare preconditioners.

    python3 demos/quickstart.py [n]
"""

import sys

from spaqr import InvPoiSpec, SolverConfig, cgls, diag_preconditioner, factorize
from spaqr.cli import make_rhs
from spaqr.problems import gen_invpoi

n = int(sys.argv[1]) if len(sys.argv) > 1 else 64
p = gen_invpoi(InvPoiSpec(dim=2, n=n, target_alpha=2.0))
A = p.A
b, xstar = make_rhs(A, seed=0)
print(f"A is {A.shape[0]} x {A.shape[1]}, alpha = {p.alpha:.3f}, nnz = {A.nnz}")

for eps in (0.0, 1e-4, 1e-2, 1e-1):
    F = factorize(A, SolverConfig(eps=eps), coords=p.coords.cols)
    x, rep = cgls(A, F, b, tol=1e-12)
    err = ((x - xstar) ** 2).sum() ** 0.5 / (xstar**2).sum() ** 0.5
    print(f"eps={eps:<7g} factor {F.timings['factor']:6.2f}s  nnz(W) {F.nnz_w:>9d}  "
          f"iterations {rep.iterations:3d}  error {err:.1e}")

_, rep = cgls(A, diag_preconditioner(A), b, tol=1e-12, maxit=500)
print(f"diagonal preconditioner: {rep.iterations} iterations, residual {rep.final_residual:.1e}")
