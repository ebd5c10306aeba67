"""Domain meshes and variable-coefficient Galerkin solvers.

Meshes are uniform: the interval (0,1), the unit square, and the L-shape
(unit square minus its upper-right quadrant, the Lipschitz-but-not-C^1
specimen).  Solvers cover Dirichlet and Neumann problems for oscillatory or
constant tensors, generalized Dirichlet eigenproblems, and the norm
evaluators used throughout the rate studies.

Oscillatory solves enforce the resolution rule h <= eps/8 so discretization
error stays an order below the homogenization signal.  In 1D the assembled
coefficient is the per-cell harmonic average and solution gradients are
flux-recovered (see cell module notes); in 2D coefficients are evaluated
pointwise at the Gauss points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import coeff as _coeff
from ._elements import reference_element
from ._krylov import SolveInfo, SolverFailure, orthonormal_rows, solve_general, solve_spd

__all__ = [
    "DomainMesh",
    "FieldFunction",
    "BVPSpec",
    "SpectralResult",
    "ResolutionError",
    "solve_dirichlet",
    "solve_neumann",
    "solve_eigen_dirichlet",
    "norm",
    "sample_oscillatory",
    "build_rigid_basis",
]

SHAPES = ("interval", "unit-square", "l-shape")


class ResolutionError(ValueError):
    """Oscillatory solve requested on a mesh coarser than eps/8."""


@dataclass(frozen=True)
class DomainMesh:
    """Uniform mesh over one of the built-in shapes.

    n is cells-per-unit; the L-shape needs n even.  Node coordinates, cell
    connectivity, boundary tags and boundary edges (with outward normals) are
    built eagerly; everything downstream is vectorized over cells.
    """

    shape: str
    n: int
    nodes: np.ndarray = field(repr=False, default=None)
    cells: np.ndarray = field(repr=False, default=None)
    boundary_mask: np.ndarray = field(repr=False, default=None)
    boundary_edges: np.ndarray = field(repr=False, default=None)
    edge_normals: np.ndarray = field(repr=False, default=None)
    corner_node: int = -1

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.nodes is None:
            nodes, cells, bmask, bedges, enorm, corner = _build_mesh(self.shape, self.n)
            object.__setattr__(self, "nodes", nodes)
            object.__setattr__(self, "cells", cells)
            object.__setattr__(self, "boundary_mask", bmask)
            object.__setattr__(self, "boundary_edges", bedges)
            object.__setattr__(self, "edge_normals", enorm)
            object.__setattr__(self, "corner_node", corner)

    @property
    def dim(self) -> int:
        return 1 if self.shape == "interval" else 2

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def nnode(self) -> int:
        return len(self.nodes)

    @property
    def ncell(self) -> int:
        return len(self.cells)

    def reference(self):
        return reference_element(self.dim, self.spacing)

    def quadrature_points(self) -> np.ndarray:
        qpts, _, _, _ = self.reference()
        origins = self.nodes[self.cells[:, 0]]
        return origins[:, None, :] + qpts[None, :, :]

    def boundary_distance(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.shape == "interval":
            return np.minimum(x[..., 0], 1 - x[..., 0])
        u, v = x[..., 0], x[..., 1]
        if self.shape == "unit-square":
            return np.minimum.reduce([u, 1 - u, v, 1 - v])
        d = np.minimum(u, v)
        d = np.minimum(d, np.where(v <= 0.5, 1 - u, 0.5 - u))
        d = np.minimum(d, np.where(u <= 0.5, 1 - v, 0.5 - v))
        corner = np.hypot(0.5 - u, 0.5 - v)
        d = np.where((u < 0.5) & (v < 0.5), np.minimum(d, corner), d)
        return d

    def interpolate(self, fun: Callable, m: int) -> np.ndarray:
        """Nodal interpolation of a closed form fun(x) -> (..., m)."""
        vals = np.asarray(fun(self.nodes), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape != (self.nnode, m):
            raise ValueError(f"interpolant shape {vals.shape} != {(self.nnode, m)}")
        return vals

    def locate(self, x: np.ndarray):
        """Cell index and local coordinates of points x for Q1 evaluation."""
        h = self.spacing
        ij = np.clip((x / h).astype(int), 0, self.n - 1)
        if self.dim == 1:
            idx = self._cell_index(ij[:, 0], None)
            loc = x[:, 0] / h - ij[:, 0]
            return idx, loc[:, None]
        idx = self._cell_index(ij[:, 0], ij[:, 1])
        loc = x / h - ij
        return idx, loc

    def _cell_index(self, ix, iy):
        if self.dim == 1:
            return ix
        full = iy * self.n + ix
        return self._cell_map[full]

    @property
    def _cell_map(self):
        if not hasattr(self, "_cmap"):
            cmap = np.full(self.n ** 2, -1, dtype=int)
            origins = self.nodes[self.cells[:, 0]]
            ij = np.rint(origins / self.spacing).astype(int)
            cmap[ij[:, 1] * self.n + ij[:, 0]] = np.arange(self.ncell)
            object.__setattr__(self, "_cmap", cmap)
        return self._cmap


def _build_mesh(shape: str, n: int):
    h = 1.0 / n
    if shape == "interval":
        nodes = (np.arange(n + 1) * h)[:, None]
        cells = np.stack([np.arange(n), np.arange(n) + 1], axis=1)
        bmask = np.zeros(n + 1, bool)
        bmask[0] = bmask[-1] = True
        bedges = np.array([[0, 0], [n, n]])
        enorm = np.array([[-1.0], [1.0]])
        return nodes, cells, bmask, bedges, enorm, -1
    nn = n + 1
    # node id = j*nn + i (x fastest) for consistency with the torus grid
    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cx, cy = ix.ravel(), iy.ravel()
    centers = np.stack([(cx + 0.5) * h, (cy + 0.5) * h], axis=1)
    if shape == "l-shape":
        if n % 2:
            raise ValueError("l-shape mesh needs an even cell count")
        keep = ~((centers[:, 0] > 0.5) & (centers[:, 1] > 0.5))
    else:
        keep = np.ones(len(cx), bool)
    cx, cy = cx[keep], cy[keep]

    def gid(i, j):
        return j * nn + i

    conn_full = np.stack([gid(cx, cy), gid(cx + 1, cy), gid(cx, cy + 1),
                          gid(cx + 1, cy + 1)], axis=1)
    used = np.zeros(nn * nn, bool)
    used[conn_full.ravel()] = True
    remap = -np.ones(nn * nn, dtype=int)
    remap[used] = np.arange(used.sum())
    gx, gy = np.meshgrid(np.arange(nn), np.arange(nn), indexing="ij")
    coords = np.empty((nn * nn, 2))
    coords[gid(gx, gy).ravel()] = np.stack([gx.ravel() * h, gy.ravel() * h], axis=1)
    nodes = coords[used]
    cells = remap[conn_full]

    # boundary edges: cell edges owned by exactly one cell
    e0 = conn_full[:, [0, 1]]
    e1 = conn_full[:, [1, 3]]
    e2 = conn_full[:, [3, 2]]
    e3 = conn_full[:, [2, 0]]
    normals = {0: (0.0, -1.0), 1: (1.0, 0.0), 2: (0.0, 1.0), 3: (-1.0, 0.0)}
    all_edges = []
    for k, ee in enumerate([e0, e1, e2, e3]):
        for a, b in ee:
            all_edges.append((min(a, b), max(a, b), k))
    from collections import Counter

    cnt = Counter((a, b) for a, b, _ in all_edges)
    bedges, enorm = [], []
    for a, b, k in all_edges:
        if cnt[(a, b)] == 1:
            bedges.append((remap[a], remap[b]))
            enorm.append(normals[k])
    bedges = np.array(bedges)
    enorm = np.array(enorm)
    bmask = np.zeros(len(nodes), bool)
    bmask[bedges.ravel()] = True
    corner = -1
    if shape == "l-shape":
        c = np.argwhere((np.abs(nodes[:, 0] - 0.5) < 1e-12)
                        & (np.abs(nodes[:, 1] - 0.5) < 1e-12))
        corner = int(c[0, 0]) if len(c) else -1
    return nodes, cells, bmask, bedges, enorm, corner


@dataclass
class FieldFunction:
    """Nodal m-component field on a mesh with quadrature-point gradients.

    quad_grads, when set by a solver, overrides the plain element gradient
    (used for the flux-recovered 1D gradients).
    """

    mesh: DomainMesh
    values: np.ndarray  # (nnode, m)
    quad_grads: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        self.values = v
        if v.shape[0] != self.mesh.nnode:
            raise ValueError("field length must equal m * node count")

    @property
    def ncomp(self) -> int:
        return self.values.shape[1]

    def at_quadrature(self) -> np.ndarray:
        _, _, shapes, _ = self.mesh.reference()
        nodal = self.values[self.mesh.cells]  # (ncell, nl, m)
        return np.einsum("ql,cla->cqa", shapes, nodal)

    def gradient_quadrature(self) -> np.ndarray:
        if self.quad_grads is not None:
            return self.quad_grads
        _, _, _, grads = self.mesh.reference()
        nodal = self.values[self.mesh.cells]
        return np.einsum("qlk,cla->cqak", grads, nodal)

    def evaluate_at(self, x: np.ndarray) -> np.ndarray:
        idx, loc = self.mesh.locate(np.atleast_2d(x))
        nodal = self.values[self.mesh.cells[idx]]  # (np, nl, m)
        if self.mesh.dim == 1:
            w = np.stack([1 - loc[:, 0], loc[:, 0]], axis=1)
        else:
            s, t = loc[:, 0], loc[:, 1]
            w = np.stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t], axis=1)
        return np.einsum("pl,pla->pa", w, nodal)


@dataclass
class BVPSpec:
    """Boundary-value problem description.

    coefficient  ("oscillatory", CoefficientField, eps) or ("constant", tensor)
    rhs          closed form fun(x)->(...,m), nodal array, or None
    bc           ("dirichlet", f) or ("neumann", g); f as fun(x)->(...,m) or
                 nodal array; g as fun(x, normal)->(...,m) or None
    compatibility 'project-constants' or 'project-rigid-modes'
    """

    coefficient: tuple
    rhs: object = None
    bc: tuple = ("dirichlet", None)
    compatibility: str = "project-constants"

    def ncomp(self) -> int:
        kind = self.coefficient[0]
        if kind == "oscillatory":
            return self.coefficient[1].ncomp
        return np.asarray(self.coefficient[1]).shape[2]


@dataclass
class SpectralResult:
    """Ascending Dirichlet eigenvalues with L2-orthonormal eigenfields."""

    eigenvalues: np.ndarray
    eigenfields: list
    residual: float
    orthonormality_defect: float
    method: str


# ---------------------------------------------------------------------------
# coefficient tables and assembly
# ---------------------------------------------------------------------------

def sample_oscillatory(A: _coeff.CoefficientField, eps: float, mesh: DomainMesh) -> np.ndarray:
    """Coefficient evaluated at (x_q / eps) mod 1 per quadrature point."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    qp = mesh.quadrature_points()
    return A(qp.reshape(-1, mesh.dim) / eps).reshape(mesh.ncell, -1, *A.shape)


def _coefficient_table(spec: BVPSpec, mesh: DomainMesh, check_resolution=True):
    kind = spec.coefficient[0]
    if kind == "constant":
        tensor = np.asarray(spec.coefficient[1], dtype=float)
        nq = 2 ** mesh.dim
        tab = np.broadcast_to(tensor, (mesh.ncell, nq) + tensor.shape).copy()
        return tab, None, None
    if kind != "oscillatory":
        raise ValueError("coefficient source must be 'constant' or 'oscillatory'")
    A, eps = spec.coefficient[1], float(spec.coefficient[2])
    if check_resolution and mesh.spacing > eps / 8 + 1e-12:
        raise ResolutionError(
            f"resolution rule violated: h={mesh.spacing:g} > eps/8={eps / 8:g}")
    tab = sample_oscillatory(A, eps, mesh)
    if mesh.dim == 1:
        pointwise = tab[..., 0, 0, 0, 0].copy()
        hc = 1.0 / np.mean(1.0 / tab, axis=1, keepdims=True)
        tab = np.broadcast_to(hc, tab.shape).copy()
        return tab, A, pointwise
    return tab, A, None


def _assemble(coef_q: np.ndarray, mesh: DomainMesh, m: int) -> sp.csr_matrix:
    _, w, _, grads = mesh.reference()
    conn = mesh.cells
    nl = conn.shape[1]
    Ke = np.einsum("q,qli,cqijab,qmj->clamb", w, grads, coef_q, grads, optimize=True)
    dof = conn[:, :, None] * m + np.arange(m)[None, None, :]
    rows = np.repeat(dof.reshape(len(conn), -1), nl * m, axis=1).ravel()
    cols = np.tile(dof.reshape(len(conn), -1), (1, nl * m)).ravel()
    return sp.coo_matrix((Ke.reshape(len(conn), -1).ravel(), (rows, cols)),
                         shape=(mesh.nnode * m, mesh.nnode * m)).tocsr()


def _mass_matrix(mesh: DomainMesh, m: int) -> sp.csr_matrix:
    _, w, shapes, _ = mesh.reference()
    conn = mesh.cells
    nl = conn.shape[1]
    base = np.einsum("q,ql,qm->lm", w, shapes, shapes)
    Me = np.zeros((nl, m, nl, m))
    for a in range(m):
        Me[:, a, :, a] = base
    dof = conn[:, :, None] * m + np.arange(m)[None, None, :]
    rows = np.repeat(dof.reshape(len(conn), -1), nl * m, axis=1).ravel()
    cols = np.tile(dof.reshape(len(conn), -1), (1, nl * m)).ravel()
    vals = np.tile(Me.reshape(1, -1), (len(conn), 1)).ravel()
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(mesh.nnode * m, mesh.nnode * m)).tocsr()


def _volume_load(spec_rhs, mesh: DomainMesh, m: int) -> np.ndarray:
    rhs = np.zeros(mesh.nnode * m)
    if spec_rhs is None:
        return rhs
    _, w, shapes, _ = mesh.reference()
    if callable(spec_rhs):
        qp = mesh.quadrature_points().reshape(-1, mesh.dim)
        fv = np.asarray(spec_rhs(qp), dtype=float)
        if fv.ndim == 1:
            fv = fv[:, None]
        fv = fv.reshape(mesh.ncell, -1, m)
    else:
        f = FieldFunction(mesh, np.asarray(spec_rhs, dtype=float))
        fv = f.at_quadrature()
    be = np.einsum("q,ql,cqa->cla", w, shapes, fv)
    dof = mesh.cells[:, :, None] * m + np.arange(m)[None, None, :]
    np.add.at(rhs, dof.ravel(), be.ravel())
    return rhs


def _boundary_load(gfun, mesh: DomainMesh, m: int) -> np.ndarray:
    rhs = np.zeros(mesh.nnode * m)
    if gfun is None:
        return rhs
    if mesh.dim == 1:
        for (a, _), nvec in zip(mesh.boundary_edges, mesh.edge_normals):
            gv = np.atleast_1d(np.asarray(gfun(mesh.nodes[a], nvec), dtype=float))
            rhs[a * m:(a + 1) * m] += gv
        return rhs
    from ._elements import GAUSS_PTS, GAUSS_WTS

    p0 = mesh.nodes[mesh.boundary_edges[:, 0]]
    p1 = mesh.nodes[mesh.boundary_edges[:, 1]]
    length = np.linalg.norm(p1 - p0, axis=1)
    for t, wt in zip(GAUSS_PTS, GAUSS_WTS):
        x = p0 + t * (p1 - p0)
        gv = np.asarray(gfun(x, mesh.edge_normals), dtype=float)
        if gv.ndim == 1:
            gv = gv[:, None]
        for a in range(m):
            np.add.at(rhs, mesh.boundary_edges[:, 0] * m + a,
                      wt * length * (1 - t) * gv[:, a])
            np.add.at(rhs, mesh.boundary_edges[:, 1] * m + a,
                      wt * length * t * gv[:, a])
    return rhs


def _quad_weights(mesh: DomainMesh) -> np.ndarray:
    _, w, _, _ = mesh.reference()
    return w


def _l2_inner(mesh: DomainMesh):
    """Quadrature L2 inner product for nodal (nnode, m) fields."""
    _, w, shapes, _ = mesh.reference()
    conn = mesh.cells

    def inner(u, v):
        uq = np.einsum("ql,cla->cqa", shapes, u[conn])
        vq = np.einsum("ql,cla->cqa", shapes, v[conn])
        return float(np.einsum("q,cqa,cqa->", w, uq, vq))

    return inner


def build_rigid_basis(mesh: DomainMesh) -> _coeff.RigidBasis:
    """L2-orthonormal rigid displacements on the mesh (d(d+1)/2 of them)."""
    return _coeff.rigid_basis(mesh.nodes, _l2_inner(mesh))


def _is_elasticity(A) -> bool:
    if not isinstance(A, _coeff.CoefficientField):
        return False
    if A.dim != 2 or A.ncomp != 2:
        return False
    probe = A(np.array([[0.13, 0.41], [0.71, 0.07]]))
    sym1 = np.abs(probe - np.einsum("sijab->sjiba", probe)).max()
    sym2 = np.abs(probe - np.einsum("sijab->sajib", probe)).max()
    return bool(sym1 < 1e-10 and sym2 < 1e-10)


_REWRITE_CACHE: dict = {}


def _dirichlet_coefficient(spec: BVPSpec):
    """Route elasticity Dirichlet solves through the symmetrizing rewrite."""
    kind = spec.coefficient[0]
    if kind == "oscillatory" and _is_elasticity(spec.coefficient[1]):
        A = spec.coefficient[1]
        key = id(A)
        if key not in _REWRITE_CACHE:
            rep = _coeff.check_ellipticity(A, 16)
            _REWRITE_CACHE[key] = _coeff.elasticity_rewrite(
                A, 0.5 * rep.elasticity_constants[0])
        return BVPSpec(("oscillatory", _REWRITE_CACHE[key], spec.coefficient[2]),
                       spec.rhs, spec.bc, spec.compatibility)
    if kind == "constant":
        T = np.asarray(spec.coefficient[1])
        d = T.shape[0]
        if d == 2 and T.shape[2] == 2:
            sym1 = np.abs(T - np.einsum("ijab->jiba", T)).max()
            sym2 = np.abs(T - np.einsum("ijab->ajib", T)).max()
            legendre = np.linalg.eigvalsh(
                0.5 * (T.transpose(2, 0, 3, 1).reshape(4, 4)
                       + T.transpose(2, 0, 3, 1).reshape(4, 4).T))[0]
            if sym1 < 1e-8 and sym2 < 1e-8 and legendre < 1e-10:
                const = _coeff.builtin_family("constant", {"value": T})
                rep = _coeff.check_ellipticity(const, 8)
                shifted = _coeff.elasticity_rewrite(const, 0.5 * rep.elasticity_constants[0])
                tensor = shifted(np.zeros((1, 2)))[0]
                return BVPSpec(("constant", tensor), spec.rhs, spec.bc,
                               spec.compatibility)
    return spec


def _1d_flux_gradients(u: np.ndarray, mesh: DomainMesh, coef_cells: np.ndarray,
                       pointwise: np.ndarray | None) -> np.ndarray:
    """Superconvergent 1D gradient: constant cell flux over pointwise coefficient."""
    h = mesh.spacing
    du = (u[mesh.cells[:, 1], 0] - u[mesh.cells[:, 0], 0]) / h
    sigma = coef_cells * du  # (ncell,)
    if pointwise is None:
        grads = np.broadcast_to(du[:, None], (mesh.ncell, 2)).copy()
    else:
        grads = sigma[:, None] / pointwise
    return grads[:, :, None, None]  # (ncell, nq, m=1, d=1)


def solve_dirichlet(spec: BVPSpec, mesh: DomainMesh, tol: float = 1e-10):
    """Galerkin solution with interpolated Dirichlet data.

    Returns (FieldFunction, info dict).  info carries the Krylov residual and
    the energy-estimate sanity numbers.
    """
    if spec.bc[0] != "dirichlet":
        raise ValueError("spec.bc must be dirichlet")
    spec = _dirichlet_coefficient(spec)
    m = spec.ncomp()
    coef_q, A_osc, pointwise = _coefficient_table(spec, mesh)
    K = _assemble(coef_q, mesh, m)
    rhs = _volume_load(spec.rhs, mesh, m)

    ub = np.zeros((mesh.nnode, m))
    fdata = spec.bc[1]
    if fdata is not None:
        if callable(fdata):
            vals = np.asarray(fdata(mesh.nodes[mesh.boundary_mask]), dtype=float)
            if vals.ndim == 1:
                vals = vals[:, None]
            ub[mesh.boundary_mask] = vals
        else:
            arr = np.asarray(fdata, dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            ub[mesh.boundary_mask] = arr[mesh.boundary_mask]

    free = np.repeat(~mesh.boundary_mask, m)
    fixed = ~free
    x = np.zeros(mesh.nnode * m)
    x[fixed] = ub.ravel()[fixed]
    b_int = rhs[free] - K[free][:, fixed] @ x[fixed]
    Kff = K[free][:, free].tocsr()
    maxiter = 2000 + 80 * mesh.n
    sym = _symmetric_coefficient(spec)
    if mesh.dim == 1:
        xi = spla.spsolve(Kff.tocsc(), b_int)
        info = SolveInfo(0, 0.0, "direct")
    elif sym:
        xi, info = solve_spd(Kff, b_int, tol, maxiter)
    else:
        xi, info = solve_general(Kff, b_int, tol, maxiter)
    x[free] = xi
    u = FieldFunction(mesh, x.reshape(mesh.nnode, m))
    if mesh.dim == 1:
        u.quad_grads = _1d_flux_gradients(u.values, mesh, coef_q[:, 0, 0, 0, 0, 0],
                                          pointwise)
    res = float(np.linalg.norm(Kff @ xi - b_int)
                / max(np.linalg.norm(b_int), 1e-300))
    energy = {
        "solution_h1": norm(u, "H1"),
        "rhs_l2": float(np.linalg.norm(rhs)),
        "lift_h1": norm(FieldFunction(mesh, ub), "H1"),
    }
    return u, {"residual": res, "method": info.method, "iterations": info.iterations,
               "energy": energy}


def _symmetric_coefficient(spec: BVPSpec) -> bool:
    if spec.coefficient[0] == "constant":
        T = np.asarray(spec.coefficient[1])
        return bool(np.abs(T - np.einsum("ijab->jiba", T)).max() < 1e-12)
    return spec.coefficient[1].symmetric


def _nullspace_fields(mesh: DomainMesh, m: int, policy: str):
    if policy == "project-rigid-modes":
        if m != mesh.dim:
            raise ValueError("rigid-mode projection needs m == d")
        rb = build_rigid_basis(mesh)
        fields = rb.fields
    else:
        fields = np.zeros((m, mesh.nnode, m))
        for a in range(m):
            fields[a, :, a] = 1.0
    return fields


def solve_neumann(spec: BVPSpec, mesh: DomainMesh, tol: float = 1e-10):
    """Neumann solve with nullspace projected out of data and solution.

    Data is first corrected for compatibility (constants or rigid modes, per
    spec.compatibility); the returned field is L2-orthogonal to the declared
    nullspace.  Elasticity systems keep the original tensor so the discrete
    kernel is exactly the rigid modes.
    """
    if spec.bc[0] != "neumann":
        raise ValueError("spec.bc must be neumann")
    m = spec.ncomp()
    coef_q, _, pointwise = _coefficient_table(spec, mesh)
    K = _assemble(coef_q, mesh, m)
    rhs = _volume_load(spec.rhs, mesh, m) + _boundary_load(spec.bc[1], mesh, m)

    ns_fields = _nullspace_fields(mesh, m, spec.compatibility)
    inner = _l2_inner(mesh)
    # compatibility correction: remove the nullspace component of the load
    # functional ell(v) = rhs . v
    defects = np.array([rhs @ f.ravel() for f in ns_fields])
    gram = np.array([[inner(u, v) for v in ns_fields] for u in ns_fields])
    # orthonormalize in L2 for reporting; correction uses the Gram solve
    coefs = np.linalg.solve(gram, defects)
    M = _mass_matrix(mesh, m)
    for c, f in zip(coefs, ns_fields):
        rhs -= c * (M @ f.ravel())
    compat_defect = float(np.abs([rhs @ f.ravel() for f in ns_fields]).max())

    nullspace = orthonormal_rows(ns_fields.reshape(len(ns_fields), -1))
    maxiter = 2000 + 80 * mesh.n
    sym = _symmetric_coefficient(spec)
    if mesh.dim == 1:
        # bordered direct solve: tiny tridiagonal systems, exact nullspace pin
        C = sp.csr_matrix(nullspace.T)
        zero = sp.csr_matrix((C.shape[1], C.shape[1]))
        big = sp.bmat([[K, C], [C.T, zero]], format="csc")
        sol = spla.spsolve(big, np.concatenate([rhs, np.zeros(C.shape[1])]))
        x = sol[:K.shape[0]]
        res = float(np.linalg.norm(K @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))
        info = SolveInfo(0, res, "direct-bordered")
    elif sym:
        x, info = solve_spd(K, rhs, tol, maxiter, nullspace=nullspace)
    else:
        x, info = solve_general(K, rhs, tol, maxiter, nullspace=nullspace)
    u = x.reshape(mesh.nnode, m)
    # L2-orthogonalize against the declared nullspace
    for f in ns_fields:
        coef = inner(u, f) / inner(f, f)
        u = u - coef * f
    uf = FieldFunction(mesh, u)
    if mesh.dim == 1:
        uf.quad_grads = _1d_flux_gradients(uf.values, mesh, coef_q[:, 0, 0, 0, 0, 0],
                                           pointwise)
    ortho = float(max(abs(inner(u, f)) for f in ns_fields))
    return uf, {"residual": info.residual, "method": info.method,
                "iterations": info.iterations, "compatibility_defect": compat_defect,
                "nullspace_orthogonality": ortho}


def solve_eigen_dirichlet(spec: BVPSpec, mesh: DomainMesh, K: int,
                          tol: float = 1e-10) -> SpectralResult:
    """K smallest Dirichlet eigenpairs of (stiffness, mass).

    Dense generalized solve for systems up to 4000 unknowns, otherwise
    shift-invert Lanczos at shift zero with a fixed deterministic start
    vector.  Requires a symmetric coefficient.
    """
    if K > 20:
        raise ValueError("eigencount capped at 20")
    if not _symmetric_coefficient(spec):
        raise ValueError("eigenvalue solve requires a symmetric coefficient")
    m = spec.ncomp()
    coef_q, _, _ = _coefficient_table(spec, mesh)
    Kmat = _assemble(coef_q, mesh, m)
    Mmat = _mass_matrix(mesh, m)
    free = np.repeat(~mesh.boundary_mask, m)
    Kff = Kmat[free][:, free].tocsc()
    Mff = Mmat[free][:, free].tocsc()
    ndof = Kff.shape[0]
    if ndof <= 4000:
        w, v = sla.eigh(Kff.toarray(), Mff.toarray(),
                        subset_by_index=[0, K - 1])
        method = "dense"
    else:
        v0 = np.ones(ndof)
        w, v = spla.eigsh(Kff, k=K, M=Mff, sigma=0.0, which="LM", v0=v0)
        order = np.argsort(w)
        w, v = w[order], v[:, order]
        method = "shift-invert-lanczos"
    # normalize in M inner product
    for k in range(K):
        nrm = np.sqrt(v[:, k] @ (Mff @ v[:, k]))
        v[:, k] /= nrm
    res = max(float(np.linalg.norm(Kff @ v[:, k] - w[k] * (Mff @ v[:, k]))
                    / max(w[k], 1e-300)) for k in range(K))
    G = v.T @ (Mff @ v)
    ortho = float(np.abs(G - np.eye(K)).max())
    fields = []
    for k in range(K):
        full = np.zeros(mesh.nnode * m)
        full[free] = v[:, k]
        fields.append(FieldFunction(mesh, full.reshape(mesh.nnode, m)))
    return SpectralResult(eigenvalues=np.asarray(w), eigenfields=fields,
                          residual=res, orthonormality_defect=ortho, method=method)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def norm(u: FieldFunction, kind: str, p: float | None = None) -> float:
    """Quadrature norms of a nodal field; Linf is the nodal max."""
    mesh = u.mesh
    w = _quad_weights(mesh)
    if kind == "Linf":
        return float(np.abs(u.values).max())
    if kind == "boundary-L2":
        if mesh.dim == 1:
            vals = u.values[mesh.boundary_edges[:, 0]]
            return float(np.sqrt((vals ** 2).sum()))
        from ._elements import GAUSS_PTS, GAUSS_WTS

        p0 = mesh.nodes[mesh.boundary_edges[:, 0]]
        p1 = mesh.nodes[mesh.boundary_edges[:, 1]]
        length = np.linalg.norm(p1 - p0, axis=1)
        v0 = u.values[mesh.boundary_edges[:, 0]]
        v1 = u.values[mesh.boundary_edges[:, 1]]
        total = 0.0
        for t, wt in zip(GAUSS_PTS, GAUSS_WTS):
            vv = (1 - t) * v0 + t * v1
            total += float((wt * length * (vv ** 2).sum(axis=1)).sum())
        return float(np.sqrt(total))
    uq = u.at_quadrature()
    if kind == "L2":
        return float(np.sqrt(np.einsum("q,cqa->", w, uq ** 2)))
    if kind == "Lp":
        if p is None or not (1 <= p < np.inf):
            raise ValueError("Lp norm needs p in [1, inf)")
        dens = (uq ** 2).sum(axis=2) ** (p / 2.0)
        return float(np.einsum("q,cq->", w, dens) ** (1.0 / p))
    gq = u.gradient_quadrature()
    semi2 = float(np.einsum("q,cqak->", w, gq ** 2))
    if kind == "H1-semi":
        return float(np.sqrt(semi2))
    if kind == "H1":
        l22 = float(np.einsum("q,cqa->", w, uq ** 2))
        return float(np.sqrt(l22 + semi2))
    raise ValueError(f"unknown norm kind '{kind}'")
