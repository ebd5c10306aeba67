"""Krylov drivers shared by the cell and domain solvers.

Symmetric systems go through preconditioned CG (Jacobi below a size threshold,
smoothed-aggregation AMG above it); nonsymmetric ones through LGMRES.  Singular
but consistent systems (periodic cell problems, pure Neumann) are handled by
projecting a supplied nullspace out of the preconditioned residual at every
iteration, which keeps the Krylov space in the orthogonal complement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

AMG_THRESHOLD = 40_000


class SolverFailure(RuntimeError):
    """Krylov non-convergence; carries the last relative residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    method: str


def _nullspace_projector(nullspace):
    if nullspace is None:
        return lambda v: v
    Q = np.asarray(nullspace)
    # rows assumed orthonormal in the Euclidean inner product
    def proj(v):
        return v - Q.T @ (Q @ v)
    return proj


def orthonormal_rows(vectors: np.ndarray) -> np.ndarray:
    """Euclidean Gram-Schmidt for nullspace vectors given as rows."""
    out = []
    for v in np.atleast_2d(vectors):
        w = v.astype(float).copy()
        for u in out:
            w -= (u @ w) * u
        nrm = np.linalg.norm(w)
        if nrm > 0:
            out.append(w / nrm)
    return np.array(out)


def _build_preconditioner(K: sp.csr_matrix, proj, use_amg: bool):
    if use_amg:
        try:
            import pyamg

            ml = pyamg.smoothed_aggregation_solver(K.tocsr(), max_coarse=500)
            amg = ml.aspreconditioner(cycle="V")

            def apply(v):
                return proj(amg @ proj(v))

            return apply, "amg-cg"
        except Exception:
            pass
    diag = K.diagonal().copy()
    diag[diag == 0.0] = 1.0

    def apply(v):
        return proj(v / diag)

    return apply, "jacobi-cg"


def solve_spd(K: sp.csr_matrix, b: np.ndarray, tol: float, maxiter: int,
              nullspace: np.ndarray | None = None, x0: np.ndarray | None = None) -> tuple:
    """CG on a symmetric positive (semi)definite system.

    With a nullspace, b is projected first and the solution is returned in the
    orthogonal complement.  Raises SolverFailure when the relative residual
    stays above tol.
    """
    proj = _nullspace_projector(nullspace)
    b = proj(np.asarray(b, dtype=float))
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveInfo(0, 0.0, "trivial")
    apply_M, method = _build_preconditioner(K, proj, K.shape[0] > AMG_THRESHOLD)
    M = spla.LinearOperator(K.shape, matvec=apply_M)
    iters = 0

    def cb(_):
        nonlocal iters
        iters += 1

    x, _ = spla.cg(K, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=M, callback=cb)
    x = proj(x)
    res = float(np.linalg.norm(K @ x - b) / bnorm)
    if res > 10 * tol:
        raise SolverFailure("conjugate gradient did not converge", res)
    return x, SolveInfo(iters, res, method)


def solve_general(K: sp.csr_matrix, b: np.ndarray, tol: float, maxiter: int,
                  nullspace: np.ndarray | None = None) -> tuple:
    """Minimum-residual Krylov solve (LGMRES) for nonsymmetric systems."""
    proj = _nullspace_projector(nullspace)
    b = proj(np.asarray(b, dtype=float))
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveInfo(0, 0.0, "trivial")
    diag = K.diagonal().copy()
    diag[diag == 0.0] = 1.0
    M = spla.LinearOperator(K.shape, matvec=lambda v: proj(v / diag))
    A = spla.LinearOperator(K.shape, matvec=lambda v: proj(K @ proj(v)))
    iters = 0

    def cb(_):
        nonlocal iters
        iters += 1

    x, _ = spla.lgmres(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M, callback=cb)
    x = proj(x)
    res = float(np.linalg.norm(proj(K @ x) - b) / bnorm)
    if res > 10 * tol:
        raise SolverFailure("lgmres did not converge", res)
    return x, SolveInfo(iters, res, "lgmres")
