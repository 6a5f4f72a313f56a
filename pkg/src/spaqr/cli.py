"""Command line driver: ``spaqr generate | factor | solve | bench | schema``.

Exit codes: 0 when the solve converged, 2 when it did not, 1 on usage or
I/O errors.  ``SPAQR_THREADS`` is reserved for a future threaded build and
currently ignored.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import jsonschema
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .factorization import PHASES, Factorization, SolverConfig, factorize
from .partition import read_coordinates, read_part_vector
from .problems import InvPoiSpec, gen_invpoi
from .solve import cgls, diag_preconditioner
from .sparse import MatrixMarketError, read_matrix_market, write_matrix_market

log = logging.getLogger("spaqr")

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2

_QUARTILES = {"type": "array", "items": {"type": "number"}, "minItems": 5, "maxItems": 5}

PROFILE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "spaqr profile record",
    "type": "object",
    "required": ["solver", "eps", "shape", "levels", "top_separator", "nnz_w", "t_P", "t_F", "t_S",
                 "iterations", "converged"],
    "properties": {
        "solver": {"enum": ["spaqr", "direct", "diag"]},
        "eps": {"type": "number", "minimum": 0},
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "levels": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["level", "times", "sparsified", "interface_sizes", "aspect_ratios"],
                "properties": {
                    "level": {"type": "integer", "minimum": 1},
                    "sparsified": {"type": "boolean"},
                    "times": {
                        "type": "object",
                        "required": list(PHASES),
                        "properties": {p: {"type": "number", "minimum": 0} for p in PHASES},
                        "additionalProperties": False,
                    },
                    "interface_sizes": _QUARTILES,
                    "aspect_ratios": _QUARTILES,
                    "fronts": {"type": "integer", "minimum": 0},
                },
            },
        },
        "top_separator": {
            "type": "object",
            "required": ["rows", "cols"],
            "properties": {"rows": {"type": "integer", "minimum": 0}, "cols": {"type": "integer", "minimum": 0}},
        },
        "nnz_w": {"type": "integer", "minimum": 0},
        "t_P": {"type": "number", "minimum": 0},
        "t_F": {"type": "number", "minimum": 0},
        "t_S": {"type": "number", "minimum": 0},
        "iterations": {"type": "integer", "minimum": 0},
        "converged": {"type": "boolean"},
        "n_dropped": {"type": "integer", "minimum": 0},
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which is reserved for non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ----------------------------------------------------------------


def profile_record(F: Factorization | None, rep, solver: str, shape, t_p=0.0, t_f=0.0) -> dict:
    """Assemble the JSON profile of one factor + solve run."""
    levels = []
    if F is not None:
        for st in F.stats:
            levels.append({
                "level": int(st["level"]),
                "sparsified": bool(st["sparsified"]),
                "times": {p: float(st["times"][p]) for p in PHASES},
                "interface_sizes": st["interface_sizes"],
                "aspect_ratios": st.get("aspect_step2", st["aspect_after"]),
                "fronts": int(st.get("fronts_step2", st["fronts_after"])),
            })
    top = F.top_separator if F is not None else (0, 0)
    rec = {
        "solver": solver,
        "eps": float(F.eps) if F is not None else 0.0,
        "shape": [int(shape[0]), int(shape[1])],
        "levels": levels,
        "top_separator": {"rows": int(top[0]), "cols": int(top[1])},
        "nnz_w": int(F.nnz_w) if F is not None else 0,
        "t_P": float(t_p),
        "t_F": float(t_f),
        "t_S": float(rep.timings.get("solve", 0.0)),
        "iterations": int(rep.iterations),
        "converged": bool(rep.converged),
        "n_dropped": int(rep.n_dropped),
    }
    jsonschema.validate(rec, PROFILE_SCHEMA)
    return rec


def make_rhs(A, seed=0, noise=1e-6):
    """``b = A x* + r`` with ``A^T r = 0`` and ``||r|| = noise * ||A x*||``.

    ``r`` lives in the null space of ``A^T``: random on rows outside a row
    matching, solved for on the matched rows.  If that square block is
    singular the noise is left out.  Returns ``(b, x_star)``.
    """
    from .partition import match_rows

    A = sp.csc_matrix(A)
    m, n = A.shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    b = A @ x
    if noise <= 0 or m == n:
        return b, x
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mt = match_rows(A)
    if (mt.row_of_col < 0).any():
        log.warning("no perfect matching; right-hand side has no noise")
        return b, x
    rm = mt.row_of_col
    free = np.setdiff1d(np.arange(m), rm)
    g = rng.standard_normal(len(free))
    Am = A[rm].tocsc()
    rhs = -(A[free].T @ g)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            r_m = spla.splu(Am.T.tocsc()).solve(rhs)
    except (RuntimeError, spla.MatrixRankWarning):
        log.warning("matched block singular; right-hand side has no noise")
        return b, x
    r = np.zeros(m)
    r[rm], r[free] = r_m, g
    nr = np.linalg.norm(r)
    if not np.isfinite(nr) or nr == 0:
        return b, x
    # accept only when r is orthogonal to range(A) to working accuracy
    if np.linalg.norm(A.T @ r) > 1e-8 * nr * spla.norm(A):
        log.warning("noise not orthogonal to working accuracy; dropped")
        return b, x
    return b + r * (noise * np.linalg.norm(b) / nr), x


def _config_from(args, eps):
    return SolverConfig(eps=eps, num_levels=args.levels, skip_levels=args.skip, store_q=args.store_q)


def run_solver(A, b, solver="spaqr", eps=1e-2, config=None, coords=None, parts=None, tol=1e-12, maxit=500,
               factor=None):
    """Factor (unless ``factor`` is given) and run CGLS; returns ``(x, report, F, t_P, t_F)``."""
    F = factor
    t_p = t_f = 0.0
    if solver == "diag":
        t0 = time.perf_counter()
        M = diag_preconditioner(A)
        t_f = time.perf_counter() - t0
        x, rep = cgls(A, M, b, tol=tol, maxit=maxit)
        return x, rep, None, t_p, t_f
    if F is None:
        if config is None:
            config = SolverConfig(eps=0.0 if solver == "direct" else eps)
        F = factorize(A, config, coords=coords, parts=parts)
        t_p, t_f = F.timings["partition"], F.timings["factor"]
    x, rep = cgls(A, F, b, tol=tol, maxit=maxit)
    return x, rep, F, t_p, t_f


def _read_matrix(path):
    try:
        return read_matrix_market(path)
    except (OSError, MatrixMarketError) as err:
        raise UsageError(f"cannot read matrix {path}: {err}") from None


def _read_vector(path, n, what):
    try:
        v = np.loadtxt(path, ndmin=1)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read {what} {path}: {err}") from None
    if v.shape != (n,):
        raise UsageError(f"{what} {path} has {v.size} entries, expected {n}")
    return v


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- commands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    dim = {"invpoi2d": 2, "invpoi3d": 3}[args.problem]
    try:
        spec = InvPoiSpec(dim=dim, n=args.n, target_alpha=args.alpha, seed=args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        p = gen_invpoi(spec)
    for w in caught:
        log.warning("%s", w.message)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_matrix_market(p.A, out / "matrix.mtx", comment=f"{args.problem} n={args.n} seed={args.seed}")
        np.savetxt(out / "coords.txt", p.coords.cols, fmt="%.1f")
        meta = {
            "problem": args.problem,
            "n": args.n,
            "seed": args.seed,
            "target_alpha": args.alpha,
            "alpha": p.alpha,
            "region_side": p.region_side,
            "shape": list(p.A.shape),
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise UsageError(f"cannot write to {out}: {err}") from None
    log.info("wrote %s (%d x %d, alpha %.4f)", out, p.A.shape[0], p.A.shape[1], p.alpha)
    return EXIT_OK


def _load_inputs(args, n):
    coords = read_coordinates(args.coords, n) if args.coords else None
    parts = read_part_vector(args.parts, n) if args.parts else None
    return coords, parts


def cmd_factor(args) -> int:
    A = _read_matrix(args.matrix)
    try:
        coords, parts = _load_inputs(args, A.shape[1])
    except (OSError, ValueError) as err:
        raise UsageError(str(err)) from None
    eps = 0.0 if args.direct else args.eps
    F = factorize(A, _config_from(args, eps), coords=coords, parts=parts)
    try:
        F.dump(args.out)
    except OSError as err:
        raise UsageError(f"cannot write {args.out}: {err}") from None
    log.info("factor %.3fs, nnz(W) %d", F.timings["factor"], F.nnz_w)
    return EXIT_OK


def cmd_solve(args) -> int:
    A = _read_matrix(args.matrix)
    m, n = A.shape
    try:
        coords, parts = _load_inputs(args, n)
    except (OSError, ValueError) as err:
        raise UsageError(str(err)) from None
    if args.rhs == "random":
        b, xstar = make_rhs(A, seed=args.seed)
    else:
        b, xstar = _read_vector(args.rhs, m, "rhs"), None

    F = None
    if args.factor:
        if args.solver == "diag":
            raise UsageError("--factor cannot be combined with --solver diag")
        try:
            F = Factorization.load(args.factor)
        except (OSError, ValueError, KeyError) as err:
            raise UsageError(f"cannot load factorization {args.factor}: {err}") from None
        if F.shape != (m, n):
            raise UsageError(f"factorization is {F.shape}, matrix is {(m, n)}")
    eps = 0.0 if args.solver == "direct" else args.eps
    config = _config_from(args, eps)
    x, rep, F, t_p, t_f = run_solver(
        A, b, args.solver, eps, config, coords, parts, args.tol, args.maxit, factor=F
    )
    rec = profile_record(F, rep, args.solver, (m, n), t_p, t_f)
    if args.profile:
        _write_json(rec, args.profile)
    if args.x_out:
        np.savetxt(args.x_out, x, fmt="%.17g")
    summary = {
        "solver": args.solver,
        "eps": eps,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "breakdown": rep.breakdown,
        "residual": rep.final_residual,
        "t_P": t_p,
        "t_F": t_f,
        "t_S": rec["t_S"],
        "nnz_w": rec["nnz_w"],
        "n_dropped": rep.n_dropped,
    }
    if xstar is not None:
        summary["error"] = float(np.linalg.norm(x - xstar) / np.linalg.norm(xstar))
    _write_json(summary, "-")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


BENCH_FIELDS = ["n", "N", "M", "alpha", "t_P", "t_F", "t_S", "iterations", "converged", "nnz_w",
                "top_rows", "top_cols"]


def bench_rows(problem, sizes, eps=1e-2, alpha=2.0, seed=0, skip=3, tol=1e-12, maxit=500):
    """Generate, factor and solve each size; returns a list of dict rows."""
    dim = {"invpoi2d": 2, "invpoi3d": 3}[problem]
    rows = []
    for n in sizes:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            p = gen_invpoi(InvPoiSpec(dim=dim, n=n, target_alpha=alpha, seed=seed))
        b, _ = make_rhs(p.A, seed=seed)
        cfg = SolverConfig(eps=eps, skip_levels=skip)
        _, rep, F, t_p, t_f = run_solver(p.A, b, "spaqr", eps, cfg, coords=p.coords.cols, tol=tol, maxit=maxit)
        rows.append({
            "n": n,
            "N": p.A.shape[1],
            "M": p.A.shape[0],
            "alpha": round(p.alpha, 6),
            "t_P": round(t_p, 6),
            "t_F": round(t_f, 6),
            "t_S": round(rep.timings["solve"], 6),
            "iterations": rep.iterations,
            "converged": int(rep.converged),
            "nnz_w": F.nnz_w,
            "top_rows": F.top_separator[0],
            "top_cols": F.top_separator[1],
        })
        log.info("n=%d done: t_F %.2fs, %d iterations", n, t_f, rep.iterations)
    return rows


def bench_exponents(rows) -> dict:
    N = [r["N"] for r in rows]
    return {
        "factor_time": loglog_slope(N, [r["t_F"] for r in rows]),
        "nnz_w": loglog_slope(N, [r["nnz_w"] for r in rows]),
        "top_cols": loglog_slope(N, [r["top_cols"] for r in rows]),
    }


def cmd_bench(args) -> int:
    rows = bench_rows(args.problem, args.sizes, args.eps, args.alpha, args.seed, args.skip, args.tol, args.maxit)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    exps = bench_exponents(rows)
    if args.csv:
        try:
            Path(args.csv).write_text(buf.getvalue())
        except OSError as err:
            raise UsageError(f"cannot write {args.csv}: {err}") from None
    else:
        sys.stdout.write(buf.getvalue())
    for k, v in exps.items():
        print(f"# exponent vs N: {k} {v:.3f}")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NOT_CONVERGED


def cmd_schema(args) -> int:
    _write_json(PROFILE_SCHEMA, "-")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _add_factor_flags(p):
    p.add_argument("--matrix", required=True, help="Matrix Market file")
    p.add_argument("--coords", help="column coordinates, one line of d floats per column")
    p.add_argument("--parts", help="leaf ids from an external partitioner, one per column")
    p.add_argument("--eps", type=float, default=1e-2, help="truncation tolerance (default 1e-2)")
    p.add_argument("--levels", type=int, default=None, help="tree levels (default ceil(log2(N/64)))")
    p.add_argument("--skip", type=int, default=3, help="levels eliminated before sparsifying (default 3)")
    p.add_argument("--store-q", action="store_true", help="keep Q (testing aid)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spaqr", description="Sparsified QR preconditioner for sparse least squares.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write an inverse Poisson test matrix")
    g.add_argument("--problem", choices=["invpoi2d", "invpoi3d"], required=True)
    g.add_argument("-n", type=int, required=True, help="grid points per side")
    g.add_argument("--alpha", type=float, default=2.0, help="target aspect ratio M/N")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("factor", help="factorize and save W")
    _add_factor_flags(f)
    f.add_argument("--direct", action="store_true", help="no compression (eps = 0)")
    f.add_argument("--out", required=True, help="output .npz")
    f.set_defaults(func=cmd_factor)

    s = sub.add_parser("solve", help="factorize and run preconditioned CGLS")
    _add_factor_flags(s)
    s.add_argument("--solver", choices=["spaqr", "direct", "diag"], default="spaqr")
    s.add_argument("--factor", help="reuse a factorization written by 'factor'")
    s.add_argument("--tol", type=float, default=1e-12)
    s.add_argument("--maxit", type=int, default=500)
    s.add_argument("--rhs", default="random", help="'random' or a file with one value per row")
    s.add_argument("--seed", type=int, default=0, help="seed of the random right-hand side")
    s.add_argument("--profile", help="write the JSON profile record here ('-' for stdout)")
    s.add_argument("--x-out", help="write the solution vector here")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="sweep grid sizes and fit scaling exponents")
    b.add_argument("--problem", choices=["invpoi2d", "invpoi3d"], default="invpoi2d")
    b.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    b.add_argument("--eps", type=float, default=1e-2)
    b.add_argument("--alpha", type=float, default=2.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--skip", type=int, default=3)
    b.add_argument("--tol", type=float, default=1e-12)
    b.add_argument("--maxit", type=int, default=500)
    b.add_argument("--csv", help="CSV output file (default stdout)")
    b.set_defaults(func=cmd_bench)

    sc = sub.add_parser("schema", help="print the JSON schema of profile records")
    sc.set_defaults(func=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s", stream=sys.stderr
    )
    if os.environ.get("SPAQR_THREADS"):
        log.debug("SPAQR_THREADS is reserved and ignored")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"spaqr: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
