"""Sparse operators for Taylor-Hood discretizations.

Conventions (``phi`` scalar P2 bases, ``q`` P1 bases, vector DOF ``(k, i)``
is component ``k`` of scalar DOF ``i``):

* viscous  ``A[(k,i),(k,j)] = nu (grad phi_j, grad phi_i)``
* convection ``N1(w)`` encodes ``((w . grad) u, v)`` and ``N2(w)`` encodes
  ``((u . grad) w, v)``, rows are test functions
* divergence ``B[i, (k,j)] = (q_i, d_k phi_j)``
* mean vector ``m_i = int q_i``

The velocity-pressure system used throughout is::

    [ A    -B^T   0 ] [y]   [F]
    [ -B    0     m ] [p] = [G]
    [ 0     m^T   0 ] [l]   [0]

where the multiplier ``l`` enforces zero-mean pressure.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .quadrature import QuadratureRule, make_rule
from .spaces import DofMap, FEField, cell_maps, eval_basis, P2

__all__ = [
    "OPERATOR_DEGREE", "SaddleSystem",
    "assemble_viscous", "assemble_mass", "assemble_divergence", "pressure_mean",
    "assemble_convection", "assemble_convection_adjoint_jacobian",
    "assemble_load", "assemble_load_values", "build_saddle", "apply_dirichlet",
    "eliminate",
]

OPERATOR_DEGREE = 6


def _scatter(local, rows, cols, shape):
    """Sum local blocks (M, R, C) into a CSR matrix."""
    M, R, C = local.shape
    r = np.broadcast_to(rows[:, :, None], (M, R, C)).ravel()
    c = np.broadcast_to(cols[:, None, :], (M, R, C)).ravel()
    A = sp.coo_matrix((local.ravel(), (r, c)), shape=shape).tocsr()
    A.sum_duplicates()
    return A


def _vector_dofs(dm: DofMap):
    """(M, 2*nb) global indices ordered component-major."""
    return np.hstack([dm.component_dofs(k) for k in range(dm.n_components)])


def _setup(mesh: Mesh, rule: QuadratureRule | None):
    rule = rule or make_rule(OPERATOR_DEGREE)
    maps = cell_maps(mesh)
    phi, dphi, _ = eval_basis(P2, rule.xy)
    grads = maps.grads(dphi)                                  # (M, Q, 6, 2)
    wq = rule.weights[None, :] * maps.detJ[:, None]
    return rule, maps, phi, grads, wq


def _block_diag(S, n):
    return sp.block_diag([S] * n, format="csr") if n > 1 else S


def assemble_viscous(mesh: Mesh, velocity: DofMap, nu: float = 1.0):
    """``nu (grad u, grad v)`` on the P2 space, block diagonal for vectors."""
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    _, _, _, g, wq = _setup(mesh, None)
    loc = nu * np.einsum("mq,mqai,mqbi->mab", wq, g, g)
    n = velocity.n_scalar
    S = _scatter(loc, velocity.cell_dofs, velocity.cell_dofs, (n, n))
    return _block_diag(S, velocity.n_components)


def assemble_mass(mesh: Mesh, space: DofMap, cells=None):
    """Mass matrix of a P1 or P2 space; ``cells`` restricts the integration.

    ``cells`` may also be a (M, Q) weight mask evaluated at the points of
    the degree-6 rule (used for indicator-weighted masses).
    """
    rule = make_rule(OPERATOR_DEGREE)
    maps = cell_maps(mesh)
    phi, _, _ = eval_basis(space.space_kind, rule.xy)
    wq = rule.weights[None, :] * maps.detJ[:, None]
    if cells is not None:
        c = np.asarray(cells)
        if c.ndim == 2:
            wq = wq * c
        else:
            mask = np.zeros(mesh.n_cells)
            mask[c] = 1.0
            wq = wq * mask[:, None]
    loc = np.einsum("mq,qa,qb->mab", wq, phi, phi)
    n = space.n_scalar
    S = _scatter(loc, space.cell_dofs, space.cell_dofs, (n, n))
    return _block_diag(S, space.n_components)


def assemble_divergence(mesh: Mesh, velocity: DofMap, pressure: DofMap):
    """``B[i, (k, j)] = (q_i, d_k phi_j)``, shape (n_p, n_v)."""
    rule, maps, _, g, wq = _setup(mesh, None)
    q, _, _ = eval_basis(pressure.space_kind, rule.xy)
    loc = np.einsum("mq,qi,mqbk->mikb", wq, q, g).reshape(mesh.n_cells, q.shape[1], -1)
    return _scatter(loc, pressure.cell_dofs, _vector_dofs(velocity),
                    (pressure.n_dofs, velocity.n_dofs))


def pressure_mean(mesh: Mesh, pressure: DofMap) -> np.ndarray:
    """Vector ``m`` with ``m @ p = int p``."""
    m = np.zeros(pressure.n_dofs)
    np.add.at(m, pressure.cell_dofs, (mesh.areas / 3.0)[:, None])
    return m


def assemble_convection(mesh: Mesh, velocity: DofMap, w, rule: QuadratureRule | None = None):
    """Return ``(N1, N2)`` for ``((w . grad) u, v)`` and ``((u . grad) w, v)``.

    ``w`` is a P2 vector FEField or a callable mapping (n, 2) points to
    ``(values (n, 2), gradients (n, 2, 2))``.
    """
    rule, maps, phi, g, wq = _setup(mesh, rule)
    if isinstance(w, FEField):
        wv, wg = w.evaluate(rule.xy, maps=maps)               # (M,Q,2), (M,Q,2,2)
    else:
        x = maps.to_physical(rule.xy)
        vals, grads = w(x.reshape(-1, 2))
        wv = np.asarray(vals, float).reshape(x.shape[:2] + (2,))
        wg = np.asarray(grads, float).reshape(x.shape[:2] + (2, 2))
    n = velocity.n_scalar
    c1 = np.einsum("mq,qa,mqi,mqbi->mab", wq, phi, wv, g)
    N1 = _block_diag(_scatter(c1, velocity.cell_dofs, velocity.cell_dofs, (n, n)), 2)
    c2 = np.einsum("mq,qa,qb,mqkl->mkalb", wq, phi, phi, wg).reshape(mesh.n_cells, 12, 12)
    vd = _vector_dofs(velocity)
    N2 = _scatter(c2, vd, vd, (velocity.n_dofs, velocity.n_dofs))
    return N1, N2


def assemble_convection_adjoint_jacobian(mesh: Mesh, velocity: DofMap, z: FEField):
    """``K[(k,i),(l,j)] = int phi_j d_l phi_i z_k``.

    The derivative of ``b(y; v, z) + b(v; y, z)`` with respect to ``y`` is
    ``K + K^T``.
    """
    rule, maps, phi, g, wq = _setup(mesh, None)
    zv, _ = z.evaluate(rule.xy, maps=maps)
    loc = np.einsum("mq,qb,mqal,mqk->mkalb", wq, phi, g, zv).reshape(mesh.n_cells, 12, 12)
    vd = _vector_dofs(velocity)
    return _scatter(loc, vd, vd, (velocity.n_dofs, velocity.n_dofs))


def assemble_load_values(mesh: Mesh, space: DofMap, values, rule: QuadratureRule,
                         cells=None) -> np.ndarray:
    """``int g . phi_i`` from values of ``g`` at the physical rule points.

    ``values`` has shape (M, Q[, 2]) matching ``cells`` (all cells if None).
    """
    maps = cell_maps(mesh, cells)
    phi, _, _ = eval_basis(space.space_kind, rule.xy)
    wq = rule.weights[None, :] * maps.detJ[:, None]
    vals = np.asarray(values, dtype=float)
    out = np.zeros(space.n_dofs)
    cd = space.cell_dofs if cells is None else space.cell_dofs[cells]
    if space.n_components == 1:
        np.add.at(out, cd, np.einsum("mq,qa,mq->ma", wq, phi, vals))
    else:
        loc = np.einsum("mq,qa,mqk->mka", wq, phi, vals)
        for k in range(2):
            np.add.at(out, cd + k * space.n_scalar, loc[:, k])
    return out


def assemble_load(mesh: Mesh, space: DofMap, func: Callable, rule: QuadratureRule | None = None,
                  cells=None) -> np.ndarray:
    """``int g . phi_i`` for an analytic ``g`` on (n, 2) points."""
    rule = rule or make_rule(19)
    maps = cell_maps(mesh, cells)
    x = maps.to_physical(rule.xy)
    vals = np.asarray(func(x.reshape(-1, 2)), dtype=float)
    vals = vals.reshape(x.shape[:2] + vals.shape[1:])
    return assemble_load_values(mesh, space, vals, rule, cells)


@dataclass(frozen=True, eq=False)
class SaddleSystem:
    """Velocity-pressure block system with an optional Dirichlet constraint."""

    velocity: DofMap
    pressure: DofMap
    A: sp.spmatrix
    B: sp.spmatrix
    m: np.ndarray
    F: np.ndarray
    G: np.ndarray
    fixed: np.ndarray = None
    values: np.ndarray = None

    @property
    def size(self) -> int:
        return self.velocity.n_dofs + self.pressure.n_dofs + 1

    def matrix(self):
        m = sp.csr_matrix(self.m[:, None])
        return sp.bmat([[self.A, -self.B.T, None],
                        [-self.B, None, m],
                        [None, m.T, None]], format="csr")

    def rhs(self):
        return np.concatenate([self.F, self.G, [0.0]])


def build_saddle(mesh: Mesh, velocity: DofMap, pressure: DofMap, A, F, G=None) -> SaddleSystem:
    B = assemble_divergence(mesh, velocity, pressure)
    G = np.zeros(pressure.n_dofs) if G is None else G
    return SaddleSystem(velocity, pressure, sp.csr_matrix(A), B, pressure_mean(mesh, pressure), F, G)


def apply_dirichlet(system: SaddleSystem, g) -> SaddleSystem:
    """Fix boundary velocity DOFs to the nodal interpolant of ``g``.

    ``g`` is a callable on (n, 2) points returning (n, 2), a constant
    2-vector, or None for homogeneous data.
    """
    dm = system.velocity
    bs = dm.boundary_scalar_dofs
    xb = dm.coordinates[bs]
    if g is None:
        vals = np.zeros((len(bs), 2))
    elif callable(g):
        vals = np.asarray(g(xb), dtype=float).reshape(len(bs), 2)
    else:
        vals = np.broadcast_to(np.asarray(g, dtype=float), (len(bs), 2))
    fixed = np.concatenate([bs, bs + dm.n_scalar])
    return replace(system, fixed=fixed, values=np.concatenate([vals[:, 0], vals[:, 1]]))


def eliminate(K, F, fixed, values):
    """Symmetric elimination of prescribed unknowns.

    Returns ``(K_ff, F_f, free)`` with ``K_ff x_f = F_f`` the reduced system.
    """
    K = sp.csr_matrix(K)
    n = K.shape[0]
    is_free = np.ones(n, dtype=bool)
    is_free[fixed] = False
    free = np.flatnonzero(is_free)
    Kc = K[:, fixed] @ values if len(fixed) else 0.0
    rhs = (F - Kc)[free]
    return K[free][:, free].tocsc(), rhs, free
