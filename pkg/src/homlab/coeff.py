"""Periodic coefficient tensors, ellipticity classes and built-in families.

A coefficient field maps y in [0,1)^d to the tensor (a_ij^{ab}) stored as an
ndarray of shape (d, d, m, m) with index order [i, j, a, b].  Evaluators are
vectorized: input (..., d) yields (..., d, d, m, m).  All built-ins are exactly
1-periodic by construction (they only consume y mod 1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CoefficientField",
    "EllipticityReport",
    "RigidBasis",
    "check_ellipticity",
    "adjoint",
    "elasticity_rewrite",
    "builtin_family",
    "BUILTIN_FAMILIES",
]


class CoefficientError(ValueError):
    """Invalid coefficient data (non-finite values, bad family parameters)."""


@dataclass(frozen=True)
class CoefficientField:
    """Periodic tensor coefficient with ellipticity metadata.

    dim       spatial dimension d (1 or 2)
    ncomp     system size m (1 or 2)
    evaluate  vectorized map y (..., d) -> (..., d, d, m, m)
    smoothness  one of 'constant', 'smooth-periodic', 'piecewise-constant'
    symmetric   whether a_ij^{ab} = a_ji^{ba} pointwise
    """

    dim: int
    ncomp: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    smoothness: str = "smooth-periodic"
    symmetric: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # analytic regularity tags carried as metadata only, never computed with
    tags: dict = field(default_factory=dict)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        vals = self.evaluate(np.mod(y, 1.0))
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(vals.reshape(y.shape[:-1] + (-1,)).any(axis=-1)))
            raise CoefficientError(f"non-finite coefficient value near sample index {bad[:1]}")
        return vals

    @property
    def shape(self) -> tuple:
        return (self.dim, self.dim, self.ncomp, self.ncomp)


@dataclass(frozen=True)
class EllipticityReport:
    """Sampled ellipticity constants of a coefficient field.

    legendre_constant          min over samples/all matrices xi of a xi xi / |xi|^2
    legendre_hadamard_constant min over rank-one xi only
    elasticity_constants       (kappa1, kappa2) over symmetric xi, or None if the
                               tensor lacks the elasticity index symmetries
    sup_norm                   max sampled |component|
    """

    legendre_constant: float
    legendre_hadamard_constant: float
    elasticity_constants: tuple | None
    sup_norm: float
    legendre_ok: bool
    legendre_hadamard_ok: bool
    elasticity_ok: bool
    sample_density: int

    STRICT_TOL = 1e-12


def _sample_grid(d: int, density: int) -> np.ndarray:
    """Half-open uniform sample grid offset from cell boundaries."""
    pts = (np.arange(density) + 0.37) / density
    if d == 1:
        return pts[:, None]
    g = np.meshgrid(*([pts] * d), indexing="ij")
    return np.stack([gg.ravel() for gg in g], axis=1)


def _sym_basis_2x2() -> np.ndarray:
    """Orthonormal basis of symmetric 2x2 matrices (m x d layout xi[a, i])."""
    s = 1.0 / np.sqrt(2.0)
    return np.array([
        [[1.0, 0.0], [0.0, 0.0]],
        [[0.0, 0.0], [0.0, 1.0]],
        [[0.0, s], [s, 0.0]],
    ])


def _has_elasticity_symmetry(A: np.ndarray, tol: float = 1e-10) -> bool:
    # needs m == d plus a_ij^{ab} = a_ji^{ba} = a_{aj}^{ib}
    d = A.shape[0]
    if A.shape[2] != d:
        return False
    sym1 = np.abs(A - np.einsum("ijab->jiba", A)).max()
    sym2 = np.abs(A - np.einsum("ijab->ajib", A)).max()
    return bool(sym1 <= tol and sym2 <= tol)


def check_ellipticity(A: CoefficientField, sample_density: int = 32) -> EllipticityReport:
    """Certify ellipticity constants by dense sampling of the quadratic forms.

    At each sample point the Legendre constant is the smallest eigenvalue of
    the symmetrized form on all m x d matrices; the Legendre-Hadamard constant
    minimizes over rank-one directions on a fine angular grid; elasticity
    constants are eigen-extremes over symmetric matrices (only for m = d with
    the full index symmetries).  Pass flags use strict positivity with a 1e-12
    tolerance.
    """
    if sample_density < 8:
        raise ValueError("sample_density must be at least 8 points per period")
    d, m = A.dim, A.ncomp
    y = _sample_grid(d, sample_density)
    vals = A(y)  # (ns, d, d, m, m)
    ns = vals.shape[0]
    sup_norm = float(np.abs(vals).max())

    # Legendre: form on xi[a, i] flattened; Q[(a i), (b j)] = a_ij^{ab}
    Q = vals.transpose(0, 3, 1, 4, 2).reshape(ns, m * d, m * d)
    Qs = 0.5 * (Q + Q.transpose(0, 2, 1))
    ev = np.linalg.eigvalsh(Qs)
    mu_L = float(ev[:, 0].min())

    # Legendre-Hadamard: xi = eta (x) q rank one; M(q)[a,b] = a_ij^{ab} q_i q_j
    if d == 1:
        qdirs = np.array([[1.0]])
    else:
        th = np.linspace(0.0, np.pi, 181, endpoint=False)
        qdirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    Mq = np.einsum("sijab,qi,qj->sqab", vals, qdirs, qdirs, optimize=True)
    Mqs = 0.5 * (Mq + Mq.transpose(0, 1, 3, 2))
    mu_LH = float(np.linalg.eigvalsh(Mqs)[..., 0].min())

    elas = None
    elas_ok = False
    if m == d == 2:
        if _has_elasticity_symmetry(vals.mean(axis=0)) and all(
            _has_elasticity_symmetry(vals[i]) for i in range(0, ns, max(1, ns // 16))
        ):
            B = _sym_basis_2x2()
            # G[p, r] = a_ij^{ab} B[p][a,i] B[r][b,j]
            G = np.einsum("sijab,pai,rbj->spr", vals, B, B, optimize=True)
            G = 0.5 * (G + G.transpose(0, 2, 1))
            evs = np.linalg.eigvalsh(G)
            elas = (float(evs[:, 0].min()), float(evs[:, -1].max()))
            elas_ok = elas[0] > EllipticityReport.STRICT_TOL
    return EllipticityReport(
        legendre_constant=mu_L,
        legendre_hadamard_constant=mu_LH,
        elasticity_constants=elas,
        sup_norm=sup_norm,
        legendre_ok=mu_L > EllipticityReport.STRICT_TOL,
        legendre_hadamard_ok=mu_LH > EllipticityReport.STRICT_TOL,
        elasticity_ok=elas_ok,
        sample_density=sample_density,
    )


def adjoint(A: CoefficientField) -> CoefficientField:
    """Componentwise index transposition a*_ij^{ab} = a_ji^{ba} (an involution)."""
    inner = A.evaluate

    def ev(y):
        return np.einsum("...ijab->...jiba", inner(y))

    return CoefficientField(
        dim=A.dim, ncomp=A.ncomp, evaluate=ev, smoothness=A.smoothness,
        symmetric=A.symmetric, name=f"adjoint({A.name})", params=dict(A.params),
        tags=dict(A.tags),
    )


def elasticity_rewrite(A: CoefficientField, mu: float) -> CoefficientField:
    """Symmetrizing shift for elasticity tensors.

    Adds mu*(delta_ia delta_jb - delta_ib delta_ja), which leaves the weak form
    on compactly supported fields unchanged while making the tensor symmetric
    and Legendre-elliptic with constant >= mu.  Requires 0 <= mu <= kappa1/2;
    mu = 0 returns A unchanged.
    """
    if mu == 0.0:
        return A
    rep = check_ellipticity(A, 16)
    if rep.elasticity_constants is None:
        raise CoefficientError("elasticity_rewrite needs an elasticity-class tensor")
    kappa1 = rep.elasticity_constants[0]
    if mu < 0 or mu > 0.5 * kappa1 + 1e-12:
        raise CoefficientError(
            f"shift mu={mu} outside (0, kappa1/2] with kappa1={kappa1:.6g}")
    d, m = A.dim, A.ncomp
    eye = np.eye(d)
    shift = mu * (np.einsum("ia,jb->ijab", eye, eye) - np.einsum("ib,ja->ijab", eye, eye))
    inner = A.evaluate

    def ev(y):
        return inner(y) + shift

    return CoefficientField(
        dim=d, ncomp=m, evaluate=ev, smoothness=A.smoothness, symmetric=True,
        name=f"rewrite({A.name},mu={mu:g})", params={**A.params, "shift": mu},
        tags=dict(A.tags),
    )


# ---------------------------------------------------------------------------
# built-in families
# ---------------------------------------------------------------------------

def _scalar_to_tensor(vfun, d):
    eye = np.eye(d)

    def ev(y):
        v = vfun(y)
        return v[..., None, None, None, None] * eye[:, :, None, None]

    return ev


def _family_constant(params):
    value = np.asarray(params.get("value", 1.0), dtype=float)
    d = int(params.get("dim", 2 if value.ndim >= 2 else 1))
    m = int(params.get("ncomp", 1))
    if value.ndim == 0:
        tensor = float(value) * np.einsum("ij,ab->ijab", np.eye(d), np.eye(m))
    elif value.ndim == 2:
        d = value.shape[0]
        tensor = np.einsum("ij,ab->ijab", value, np.eye(m))
    elif value.ndim == 4:
        d, m = value.shape[0], value.shape[2]
        tensor = value
    else:
        raise CoefficientError("constant family: value must be scalar, matrix or rank-4")

    def ev(y):
        return np.broadcast_to(tensor, y.shape[:-1] + tensor.shape).copy()

    sym = bool(np.abs(tensor - np.einsum("ijab->jiba", tensor)).max() < 1e-14)
    return CoefficientField(d, m, ev, "constant", sym, "constant", dict(params))


def _family_scalar_1d_cos(params):
    base = float(params.get("base", 2.0))
    amp = float(params.get("amp", 1.0))
    phase = float(params.get("phase", 0.0))
    if base - abs(amp) <= 0:
        raise CoefficientError("scalar-1d-cos: base - |amp| must be positive")

    def vfun(y):
        return base + amp * np.cos(2 * np.pi * (y[..., 0] - phase))

    return CoefficientField(1, 1, _scalar_to_tensor(vfun, 1), "smooth-periodic",
                            True, "scalar-1d-cos", dict(params))


def _family_laminate_2d(params):
    base = float(params.get("base", 2.0))
    amp = float(params.get("amp", 1.0))
    phase = float(params.get("phase", 0.0))
    axis = int(params.get("axis", 0))
    if base - abs(amp) <= 0:
        raise CoefficientError("laminate-2d: base - |amp| must be positive")

    def vfun(y):
        return base + amp * np.cos(2 * np.pi * (y[..., axis] - phase))

    return CoefficientField(2, 1, _scalar_to_tensor(vfun, 2), "smooth-periodic",
                            True, "laminate-2d", dict(params))


def _family_checkerboard_2d(params):
    lo = float(params.get("alpha", 1.0))
    hi = float(params.get("beta", 4.0))
    if lo <= 0 or hi <= 0:
        raise CoefficientError("checkerboard-2d: both values must be positive")

    def vfun(y):
        # half-open subsquares so samples never sit on an interface ambiguously
        q = (y[..., 0] >= 0.5) ^ (y[..., 1] >= 0.5)
        return np.where(q, hi, lo)

    return CoefficientField(2, 1, _scalar_to_tensor(vfun, 2), "piecewise-constant",
                            True, "checkerboard-2d", dict(params))


def _family_smooth_matrix_2d(params):
    base = float(params.get("base", 3.0))
    amp = float(params.get("amp", 1.0))
    skew = float(params.get("skew", 0.0))
    # matrix eigenvalues stay within base +/- (3/2)|amp|; keep it elliptic
    if base - 1.5 * abs(amp) - abs(skew) <= 0:
        raise CoefficientError("smooth-matrix-2d: base too small for chosen amp/skew")

    def ev(y):
        c1 = np.cos(2 * np.pi * y[..., 0])
        c2 = np.cos(2 * np.pi * y[..., 1])
        s12 = np.sin(2 * np.pi * (y[..., 0] + y[..., 1]))
        out = np.zeros(y.shape[:-1] + (2, 2, 1, 1))
        out[..., 0, 0, 0, 0] = base + amp * c1
        out[..., 1, 1, 0, 0] = base + amp * c2
        out[..., 0, 1, 0, 0] = 0.5 * amp * s12 + skew * np.sin(2 * np.pi * y[..., 1])
        out[..., 1, 0, 0, 0] = 0.5 * amp * s12 - skew * np.sin(2 * np.pi * y[..., 1])
        return out

    return CoefficientField(2, 1, ev, "smooth-periodic", skew == 0.0,
                            "smooth-matrix-2d", dict(params))


def _family_elasticity_isotropic(params):
    lam0 = float(params.get("lambda0", 1.0))
    lam1 = float(params.get("lambda1", 0.0))
    mu0 = float(params.get("mu0", 1.0))
    mu1 = float(params.get("mu1", 0.0))
    axis = int(params.get("axis", 0))
    if mu0 - abs(mu1) <= 0 or lam0 - abs(lam1) < 0:
        raise CoefficientError("elasticity-isotropic-periodic: Lame moduli must stay positive")
    eye = np.eye(2)
    T_lam = np.einsum("ia,jb->ijab", eye, eye)
    T_mu = (np.einsum("ij,ab->ijab", eye, eye) + np.einsum("ib,ja->ijab", eye, eye))

    def ev(y):
        c = np.cos(2 * np.pi * y[..., axis])
        lam = lam0 + lam1 * c
        mu = mu0 + mu1 * c
        return lam[..., None, None, None, None] * T_lam + mu[..., None, None, None, None] * T_mu

    return CoefficientField(2, 2, ev, "smooth-periodic" if (lam1 or mu1) else "constant",
                            True, "elasticity-isotropic-periodic", dict(params))


BUILTIN_FAMILIES = {
    "constant": _family_constant,
    "scalar-1d-cos": _family_scalar_1d_cos,
    "laminate-2d": _family_laminate_2d,
    "checkerboard-2d": _family_checkerboard_2d,
    "smooth-matrix-2d": _family_smooth_matrix_2d,
    "elasticity-isotropic-periodic": _family_elasticity_isotropic,
}


def builtin_family(name: str, params: dict | None = None) -> CoefficientField:
    """Construct one of the built-in coefficient families by name."""
    if name not in BUILTIN_FAMILIES:
        raise CoefficientError(
            f"unknown family '{name}'; choose from {sorted(BUILTIN_FAMILIES)}")
    return BUILTIN_FAMILIES[name](params or {})


# ---------------------------------------------------------------------------
# rigid displacements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidBasis:
    """L2-orthonormal basis of the rigid displacements {Bx + b : B skew}."""

    fields: np.ndarray  # (count, nnode, d) nodal values
    gram_defect: float

    @property
    def count(self) -> int:
        return self.fields.shape[0]


def rigid_basis(points: np.ndarray, inner: Callable[[np.ndarray, np.ndarray], float]) -> RigidBasis:
    """Orthonormalize the rigid displacement fields on the given node set.

    points (nnode, d); inner(u, v) is the discrete L2 inner product for nodal
    (nnode, d) fields.  The count is d(d+1)/2.
    """
    pts = np.asarray(points, dtype=float)
    n, d = pts.shape
    raw = []
    for k in range(d):
        e = np.zeros((n, d))
        e[:, k] = 1.0
        raw.append(e)
    if d == 2:
        rot = np.stack([-pts[:, 1], pts[:, 0]], axis=1)
        raw.append(rot)
    basis = []
    for v in raw:
        w = v.copy()
        for u in basis:
            w -= inner(u, w) * u
        nrm = np.sqrt(inner(w, w))
        basis.append(w / nrm)
    fields = np.stack(basis)
    gram = np.array([[inner(u, v) for v in fields] for u in fields])
    defect = float(np.abs(gram - np.eye(len(basis))).max())
    return RigidBasis(fields=fields, gram_defect=defect)
