"""Smoothing operator, boundary cutoffs, two-scale expansions and the
Dirichlet/Neumann boundary correctors.

The smoothing operator convolves nodal fields with a compactly supported
even bump at scale eps; fields are extended by even reflection across the
boundary (scipy 'mirror'), and across the reentrant edges for the L-shape.
Two-scale discrepancies carry their gradient assembled by the chain rule at
quadrature points, with corrector values/gradients interpolated periodically
from the torus grid (so no cell problem is re-solved per eps).
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from . import cell as _cell
from . import coeff as _coeff
from . import fem as _fem

__all__ = [
    "Mollifier",
    "Cutoff",
    "Expansion",
    "BoundaryCorrector",
    "smooth",
    "build_cutoff",
    "expansion",
    "solve_dirichlet_corrector",
    "solve_neumann_corrector",
]


def _bump(z2: np.ndarray) -> np.ndarray:
    # z2 = |2z|^2; profile exp(-1/(1-|2z|^2)) inside the half-ball
    out = np.zeros_like(z2)
    inside = z2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - z2[inside]))
    return out


@dataclass(frozen=True)
class Mollifier:
    """Even, nonnegative bump supported in the half-ball, unit mass.

    The profile is a configuration knob; rates are profile-independent while
    constants are not.  kernel() samples the scaled profile on the mesh grid
    and normalizes the weights so constants are preserved exactly.
    """

    name: str = "gaussian-bump"
    profile: callable = _bump

    def kernel(self, eps: float, h: float, dim: int) -> np.ndarray:
        if eps < 2 * h - 1e-12:
            raise ValueError(f"kernel under-resolved: eps={eps:g} < 2h={2 * h:g}")
        r = int(np.floor(0.5 * eps / h + 1e-12))
        offs = np.arange(-r, r + 1) * (h / eps)
        if dim == 1:
            z2 = (2 * offs) ** 2
            w = self.profile(z2)
        else:
            zx, zy = np.meshgrid(offs, offs, indexing="ij")
            w = self.profile(4 * (zx ** 2 + zy ** 2))
        s = w.sum()
        if s <= 0:
            raise ValueError("empty mollifier kernel")
        return w / s

    def mass_defect(self, eps: float, h: float, dim: int) -> float:
        """Deviation of the discrete kernel mass from one (zero by construction)."""
        return abs(float(self.kernel(eps, h, dim).sum()) - 1.0)


DEFAULT_MOLLIFIER = Mollifier()


def _grid_shape(mesh: _fem.DomainMesh):
    nn = mesh.n + 1
    return (nn,) if mesh.dim == 1 else (nn, nn)


def _to_grid(mesh: _fem.DomainMesh, values: np.ndarray) -> np.ndarray:
    """Nodal (nnode,) scalar to the structured grid [j, i]; L-shape gets the
    missing quadrant filled by even reflection across the reentrant edges."""
    nn = mesh.n + 1
    if mesh.dim == 1:
        return values.copy()
    grid = np.zeros((nn, nn))
    idx = np.rint(mesh.nodes / mesh.spacing).astype(int)
    grid[idx[:, 1], idx[:, 0]] = values
    if mesh.shape == "l-shape":
        half = mesh.n // 2
        jj, ii = np.meshgrid(np.arange(half + 1, nn), np.arange(half + 1, nn),
                             indexing="ij")
        refl_x = grid[jj, 2 * half - ii]
        refl_y = grid[2 * half - jj, ii]
        grid[jj, ii] = 0.5 * (refl_x + refl_y)
    return grid


def _from_grid(mesh: _fem.DomainMesh, grid: np.ndarray) -> np.ndarray:
    if mesh.dim == 1:
        return grid.copy()
    idx = np.rint(mesh.nodes / mesh.spacing).astype(int)
    return grid[idx[:, 1], idx[:, 0]]


def smooth(field: _fem.FieldFunction, eps: float,
           mollifier: Mollifier | None = None, passes: int = 1,
           mode: str = "mirror") -> _fem.FieldFunction:
    """Discrete convolution with the scaled mollifier; passes=2 composes it.

    mode 'mirror' extends by even reflection across the boundary; 'wrap' is
    used for periodic test fields.
    """
    if passes not in (1, 2):
        raise ValueError("passes must be 1 or 2")
    mol = mollifier or DEFAULT_MOLLIFIER
    mesh = field.mesh
    kern = mol.kernel(eps, mesh.spacing, mesh.dim)
    out = np.empty_like(field.values)
    for a in range(field.ncomp):
        g = _to_grid(mesh, field.values[:, a])
        for _ in range(passes):
            if mesh.dim == 1:
                g = ndimage.convolve1d(g, kern, mode=mode)
            else:
                g = ndimage.convolve(g, kern, mode=mode)
        out[:, a] = _from_grid(mesh, g)
    return _fem.FieldFunction(mesh, out)


def smooth_periodic(values: np.ndarray, h: float, eps: float,
                    mollifier: Mollifier | None = None, passes: int = 1) -> np.ndarray:
    """Smoothing of a raw periodic array (torus fields in tests)."""
    mol = mollifier or DEFAULT_MOLLIFIER
    dim = values.ndim
    kern = mol.kernel(eps, h, dim)
    g = values.copy()
    for _ in range(passes):
        if dim == 1:
            g = ndimage.convolve1d(g, kern, mode="wrap")
        else:
            g = ndimage.convolve(g, kern, mode="wrap")
    return g


@dataclass
class Cutoff:
    """Boundary cutoff: 0 inside dist<=3eps, 1 outside dist>=4eps, cubic ramp."""

    mesh: _fem.DomainMesh
    eps: float
    values: np.ndarray
    gradient_constant: float  # measured sup |grad eta| * eps

    def as_field(self) -> _fem.FieldFunction:
        return _fem.FieldFunction(self.mesh, self.values)


def build_cutoff(mesh: _fem.DomainMesh, eps: float) -> Cutoff:
    """Cubic-smoothstep cutoff in the boundary distance (ramp on [3eps, 4eps])."""
    diam = 1.0 if mesh.shape == "interval" else np.sqrt(2.0)
    if 8 * eps >= diam:
        raise ValueError(f"cutoff infeasible: 8*eps={8 * eps:g} >= diameter {diam:g}")
    dist = mesh.boundary_distance(mesh.nodes)
    t = np.clip((dist - 3 * eps) / eps, 0.0, 1.0)
    vals = t * t * (3 - 2 * t)
    f = _fem.FieldFunction(mesh, vals)
    gmax = float(np.abs(f.gradient_quadrature()).max())
    return Cutoff(mesh=mesh, eps=eps, values=vals, gradient_constant=gmax * eps)


# ---------------------------------------------------------------------------
# periodic interpolation of correctors
# ---------------------------------------------------------------------------

def _periodic_interp(grids: np.ndarray, pts: np.ndarray, n: int, offset: float):
    """Bilinear periodic interpolation.

    grids (..., n) or (..., n, n) with layout [.., iy, ix]; pts (npts, dim) in
    [0,1); offset 0.0 for node-based data, 0.5 for cell-centered data.
    """
    t = pts * n - offset
    i0 = np.floor(t).astype(int)
    frac = t - i0
    if pts.shape[1] == 1:
        a = grids[..., i0[:, 0] % n]
        b = grids[..., (i0[:, 0] + 1) % n]
        return a * (1 - frac[:, 0]) + b * frac[:, 0]
    ix0, iy0 = i0[:, 0] % n, i0[:, 1] % n
    ix1, iy1 = (i0[:, 0] + 1) % n, (i0[:, 1] + 1) % n
    fx, fy = frac[:, 0], frac[:, 1]
    v00 = grids[..., iy0, ix0]
    v10 = grids[..., iy0, ix1]
    v01 = grids[..., iy1, ix0]
    v11 = grids[..., iy1, ix1]
    return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy + v11 * fx * fy)


def corrector_values_at(correctors: _cell.CorrectorSet, y: np.ndarray) -> np.ndarray:
    """chi_j^{ab} at periodic points y: returns (npts, d, m, m) = [p, j, b, a]."""
    grid = correctors.grid
    n, d, m = grid.n, grid.dim, correctors.ncomp
    shape = (d, m, m) + ((n,) if d == 1 else (n, n))
    # values[j, b, node, a] -> [j, b, a, grid]
    g = correctors.values.transpose(0, 1, 3, 2).reshape(shape)
    out = _periodic_interp(g, np.atleast_2d(y), n, 0.0)
    return np.moveaxis(out, -1, 0)


def corrector_grads_at(correctors: _cell.CorrectorSet, y: np.ndarray) -> np.ndarray:
    """d_k chi_j^{ab} at periodic points: (npts, d, m, m, d) = [p, j, b, a, k].

    Gradients live at cell quadrature points; their per-cell means act as
    cell-centered samples interpolated periodically.
    """
    grid = correctors.grid
    n, d, m = grid.n, grid.dim, correctors.ncomp
    cellmean = correctors.gradients.mean(axis=3)  # (d, m, ncell, m, dgrad)
    shape = (d, m, m, d) + ((n,) if d == 1 else (n, n))
    g = cellmean.transpose(0, 1, 3, 4, 2).reshape(shape)
    out = _periodic_interp(g, np.atleast_2d(y), n, 0.5)
    return np.moveaxis(out, -1, 0)


def _nodal_gradient(u: _fem.FieldFunction) -> np.ndarray:
    """Second-order nodal gradient of each component: (nnode, m, d)."""
    mesh = u.mesh
    h = mesh.spacing
    out = np.empty((mesh.nnode, u.ncomp, mesh.dim))
    for a in range(u.ncomp):
        g = _to_grid(mesh, u.values[:, a])
        if mesh.dim == 1:
            out[:, a, 0] = np.gradient(g, h)
        else:
            gy, gx = np.gradient(g, h)
            out[:, a, 0] = _from_grid(mesh, gx)
            out[:, a, 1] = _from_grid(mesh, gy)
    return out


@dataclass
class Expansion:
    """Two-scale discrepancy w with chain-rule gradients and norms.

    variant: 'smoothed' (eta * S_eps^2 grad u0), 'plain' (grad u0), or
    'dirichlet-corrector' ((Phi - P) grad u0, no eps chi term).
    """

    variant: str
    eps: float
    w: _fem.FieldFunction
    norms: dict = dc_field(default_factory=dict)
    boundary_trace: float = 0.0
    cutoff: Cutoff | None = None


def expansion(u_eps: _fem.FieldFunction, u0: _fem.FieldFunction,
              correctors: _cell.CorrectorSet | None, eps: float, variant: str,
              dirichlet_corrector: "BoundaryCorrector | None" = None,
              mollifier: Mollifier | None = None,
              project_mean: bool = False) -> Expansion:
    """Assemble the two-scale discrepancy for the requested variant."""
    if u_eps.mesh is not u0.mesh and u_eps.mesh.nnode != u0.mesh.nnode:
        raise ValueError("u_eps and u0 must share a mesh")
    mesh = u_eps.mesh
    m = u_eps.ncomp
    d = mesh.dim
    grad0_nodal = _nodal_gradient(u0)  # (nnode, m, d)

    if variant == "dirichlet-corrector":
        if dirichlet_corrector is None:
            raise ValueError("dirichlet-corrector variant needs the corrector fields")
        dev_vals = dirichlet_corrector.deviation_values()  # (d, m, nnode, m)
        corr_nodal = np.einsum("jbpa,pbj->pa", dev_vals, grad0_nodal)
        G = _fem.FieldFunction(mesh, grad0_nodal.reshape(mesh.nnode, m * d))
    else:
        if correctors is None:
            raise ValueError("expansion needs a corrector set")
        if variant == "smoothed":
            gvals = np.empty_like(grad0_nodal)
            cut = build_cutoff(mesh, eps)
            for j in range(d):
                sm = smooth(_fem.FieldFunction(mesh, grad0_nodal[:, :, j]), eps,
                            mollifier, passes=2)
                gvals[:, :, j] = cut.values[:, None] * sm.values
        elif variant == "plain":
            gvals = grad0_nodal
            cut = None
        else:
            raise ValueError(f"unknown variant '{variant}'")
        y_nodes = np.mod(mesh.nodes / eps, 1.0)
        chi_n = corrector_values_at(correctors, y_nodes)  # (nnode, d, m, m)=[p,j,b,a]
        corr_nodal = eps * np.einsum("pjba,pbj->pa", chi_n, gvals)
        G = _fem.FieldFunction(mesh, gvals.reshape(mesh.nnode, m * d))

    w_vals = u_eps.values - u0.values - corr_nodal
    if project_mean:
        inner = _fem._l2_inner(mesh)
        ones = np.ones((mesh.nnode, 1))
        vol = inner(ones, ones)
        for a in range(m):
            comp = w_vals[:, a:a + 1]
            w_vals[:, a] -= inner(comp, ones) / vol
    w = _fem.FieldFunction(mesh, w_vals)

    # chain-rule gradient at quadrature points
    xq = mesh.quadrature_points().reshape(-1, d)
    Gq = G.at_quadrature().reshape(mesh.ncell, -1, m, d)          # [c,q,b,j]
    dGq = G.gradient_quadrature().reshape(mesh.ncell, -1, m, d, d)  # [c,q,b,j,k]
    if variant == "dirichlet-corrector":
        dev_q, dev_grad_q = dirichlet_corrector.deviation_at_quadrature()
        corr_grad = (np.einsum("cqjbak,cqbj->cqak", dev_grad_q, Gq)
                     + np.einsum("cqjba,cqbjk->cqak", dev_q, dGq))
    else:
        yq = np.mod(xq / eps, 1.0)
        chi_q = corrector_values_at(correctors, yq).reshape(mesh.ncell, -1, d, m, m)
        dchi_q = corrector_grads_at(correctors, yq).reshape(mesh.ncell, -1, d, m, m, d)
        corr_grad = (np.einsum("cqjbak,cqbj->cqak", dchi_q, Gq)
                     + eps * np.einsum("cqjba,cqbjk->cqak", chi_q, dGq))
    w.quad_grads = u_eps.gradient_quadrature() - u0.gradient_quadrature() - corr_grad

    norms = {
        "L2": _fem.norm(w, "L2"),
        "H1": _fem.norm(w, "H1"),
        "H1-semi": _fem.norm(w, "H1-semi"),
    }
    btrace = float(np.abs(w.values[mesh.boundary_mask]).max())
    return Expansion(variant=variant, eps=eps, w=w, norms=norms,
                     boundary_trace=btrace,
                     cutoff=cut if variant == "smoothed" else None)


# ---------------------------------------------------------------------------
# boundary correctors
# ---------------------------------------------------------------------------

@dataclass
class BoundaryCorrector:
    """Boundary-corrector columns for the coordinate probes x_j e^b.

    values      (d, m, nnode, m) nodal fields [j, b, node, a]
    quad_grads  (d, m, ncell, nq, m, d)
    deviation_sup   max over nodes/columns of |field - probe|
    """

    mesh: _fem.DomainMesh
    kind: str  # 'dirichlet' or 'neumann'
    eps: float
    values: np.ndarray
    quad_grads: np.ndarray
    deviation_sup: float
    anchor_node: int = -1
    gradient_sup: float = 0.0

    def probe_values(self) -> np.ndarray:
        d, m = self.values.shape[0], self.values.shape[1]
        P = np.zeros_like(self.values)
        for j in range(d):
            for b in range(m):
                P[j, b, :, b] = self.mesh.nodes[:, j]
        return P

    def deviation_values(self) -> np.ndarray:
        return self.values - self.probe_values()

    def deviation_at_quadrature(self):
        """Deviation and its gradient at quadrature points:
        (ncell, nq, d, m, m) = [c,q,j,b,a] and (ncell, nq, d, m, m, d)."""
        mesh = self.mesh
        d, m = self.values.shape[0], self.values.shape[1]
        _, _, shapes, grads = mesh.reference()
        dev = self.deviation_values()
        nodal = dev[:, :, mesh.cells, :]  # (d, m, ncell, nl, a)
        dev_q = np.einsum("ql,jbcla->cqjba", shapes, nodal)
        dev_g = self.quad_grads.copy()  # (d, m, ncell, nq, a, k)
        for j in range(d):
            for b in range(m):
                dev_g[j, b, :, :, b, j] -= 1.0
        dev_grad_q = np.ascontiguousarray(dev_g.transpose(2, 3, 0, 1, 4, 5))
        return dev_q, dev_grad_q


def solve_dirichlet_corrector(A: _coeff.CoefficientField, eps: float,
                              mesh: _fem.DomainMesh, tol: float = 1e-10) -> BoundaryCorrector:
    """Oscillatory solves with the coordinate probes as Dirichlet data."""
    d, m = A.dim, A.ncomp
    values = np.zeros((d, m, mesh.nnode, m))
    nq = 2 ** mesh.dim
    qgrads = np.zeros((d, m, mesh.ncell, nq, m, d))
    sup = 0.0
    for j in range(d):
        for b in range(m):
            def probe(x, jj=j, bb=b):
                out = np.zeros((len(x), m))
                out[:, bb] = x[:, jj]
                return out

            spec = _fem.BVPSpec(("oscillatory", A, eps), rhs=None,
                                bc=("dirichlet", probe))
            u, _ = _fem.solve_dirichlet(spec, mesh, tol)
            values[j, b] = u.values
            qgrads[j, b] = u.gradient_quadrature()
            dev = u.values.copy()
            dev[:, b] -= mesh.nodes[:, j]
            sup = max(sup, float(np.abs(dev).max()))
    gsup = float(np.abs(qgrads).max())
    return BoundaryCorrector(mesh=mesh, kind="dirichlet", eps=eps, values=values,
                             quad_grads=qgrads, deviation_sup=sup,
                             gradient_sup=gsup)


def solve_neumann_corrector(A: _coeff.CoefficientField, eps: float,
                            mesh: _fem.DomainMesh, tol: float = 1e-10,
                            hom: _cell.HomogenizedTensor | None = None,
                            cell_n: int = 256) -> BoundaryCorrector:
    """Oscillatory Neumann solves matching the homogenized conormal of the probes.

    Fields are anchored at the node nearest the domain barycenter so the
    corrector equals the probe there.
    """
    if not A.symmetric:
        raise ValueError("neumann corrector requires a symmetric coefficient")
    d, m = A.dim, A.ncomp
    if hom is None:
        grid = _cell.TorusGrid(d, cell_n)
        hom = _cell.homogenized_tensor(A, _cell.solve_correctors(A, grid, tol))
    a_hat = hom.tensor
    bary = mesh.nodes.mean(axis=0)
    anchor = int(np.argmin(((mesh.nodes - bary) ** 2).sum(axis=1)))
    values = np.zeros((d, m, mesh.nnode, m))
    nq = 2 ** mesh.dim
    qgrads = np.zeros((d, m, mesh.ncell, nq, m, d))
    sup = 0.0
    for j in range(d):
        for b in range(m):
            def conormal(x, nvec, jj=j, bb=b):
                nv = np.atleast_2d(nvec)
                gv = np.einsum("ei,ia->ea", nv, a_hat[:, jj, :, bb])
                if len(gv) == 1 and np.ndim(x) == 1:
                    return gv[0]
                return gv

            spec = _fem.BVPSpec(("oscillatory", A, eps), rhs=None,
                                bc=("neumann", conormal),
                                compatibility="project-constants")
            u, _ = _fem.solve_neumann(spec, mesh, tol)
            vals = u.values.copy()
            shift = np.zeros(m)
            shift[b] = mesh.nodes[anchor, j]
            vals += shift - vals[anchor]
            values[j, b] = vals
            qgrads[j, b] = u.gradient_quadrature()
            dev = vals.copy()
            dev[:, b] -= mesh.nodes[:, j]
            sup = max(sup, float(np.abs(dev).max()))
    gsup = float(np.abs(qgrads).max())
    return BoundaryCorrector(mesh=mesh, kind="neumann", eps=eps, values=values,
                             quad_grads=qgrads, deviation_sup=sup,
                             anchor_node=anchor, gradient_sup=gsup)
