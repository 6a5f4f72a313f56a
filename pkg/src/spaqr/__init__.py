"""Sparsified QR (spaQR) preconditioning for sparse linear least squares.

Typical use::

    from spaqr import SolverConfig, factorize, cgls
    F = factorize(A, SolverConfig(eps=1e-2), coords=xy)
    x, report = cgls(A, F, b)
"""

from .dense import SingularFrontError
from .factorization import Factorization, SolverConfig, factorize, spaqr_factorize
from .partition import infer_interfaces, nested_dissection
from .problems import InvPoiSpec, gen_invpoi, gen_invpoi_2d, gen_invpoi_3d
from .solve import SolveReport, cgls, csne_solve, diag_preconditioner
from .sparse import read_matrix_market, write_matrix_market

__all__ = [
    "SingularFrontError",
    "Factorization",
    "SolverConfig",
    "factorize",
    "spaqr_factorize",
    "infer_interfaces",
    "nested_dissection",
    "InvPoiSpec",
    "gen_invpoi",
    "gen_invpoi_2d",
    "gen_invpoi_3d",
    "SolveReport",
    "cgls",
    "csne_solve",
    "diag_preconditioner",
    "read_matrix_market",
    "write_matrix_market",
]

__version__ = "0.1.0"
