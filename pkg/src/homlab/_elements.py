"""Shared linear/bilinear element data on uniform grids.

Everything here is expressed on the reference cell [0,1]^d and scaled by the
cell width h where needed.  Quadrature is tensor Gauss 2-point, which is exact
for the bilinear mass matrix and keeps trigonometric coefficients at second
order.
"""
from __future__ import annotations

import numpy as np

GAUSS_PTS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
GAUSS_WTS = np.array([0.5, 0.5])


def reference_element(dim: int, h: float):
    """Quadrature and shape data for one cell of width h.

    Returns (qpts, weights, shapes, grads) with
      qpts    (nq, dim)       quadrature points in cell-local coords scaled by h,
      weights (nq,)           quadrature weights (include cell volume),
      shapes  (nq, nl)        nodal shape values,
      grads   (nq, nl, dim)   nodal shape gradients (already divided by h).
    Local node order: 1D (0, 1); 2D (00, 10, 01, 11) with x fastest.
    """
    if dim == 1:
        x = GAUSS_PTS
        qpts = (x * h)[:, None]
        weights = GAUSS_WTS * h
        shapes = np.stack([1 - x, x], axis=1)
        grads = np.broadcast_to(np.array([-1.0, 1.0]) / h, (2, 2))[:, :, None].copy()
        return qpts, weights, shapes, grads
    if dim == 2:
        gx, gy = np.meshgrid(GAUSS_PTS, GAUSS_PTS, indexing="ij")
        x = gx.ravel()
        y = gy.ravel()
        qpts = np.stack([x * h, y * h], axis=1)
        weights = np.full(4, h * h / 4.0)
        shapes = np.stack([(1 - x) * (1 - y), x * (1 - y), (1 - x) * y, x * y], axis=1)
        dNx = np.stack([-(1 - y), (1 - y), -y, y], axis=1) / h
        dNy = np.stack([-(1 - x), -x, (1 - x), x], axis=1) / h
        grads = np.stack([dNx, dNy], axis=2)
        return qpts, weights, shapes, grads
    raise ValueError(f"unsupported dimension {dim}")


def element_stiffness(coef, grads, weights):
    """Element stiffness blocks for a tensor coefficient.

    coef    (ncell, nq, d, d, m, m)  coefficient at quadrature points,
    grads   (nq, nl, d), weights (nq,).
    Returns (ncell, nl, m, nl, m) with K[c,l,a,l',b] = sum_q w G[l,i] a_ij^{ab} G[l',j].
    """
    return np.einsum("q,qli,cqijab,qmj->clamb", weights, grads, coef, grads, optimize=True)


def element_mass(shapes, weights, m):
    """Element mass block (nl, m, nl, m), identical for every cell."""
    nl = shapes.shape[1]
    base = np.einsum("q,ql,qm->lm", weights, shapes, shapes)
    out = np.zeros((nl, m, nl, m))
    for a in range(m):
        out[:, a, :, a] = base
    return out
