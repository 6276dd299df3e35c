"""Taylor-Hood spaces: continuous P2 (vector) and P1 (scalar) Lagrange elements.

Local P2 ordering: vertices 0, 1, 2, then the midpoints of the edges
opposite vertices 0, 1, 2.  Global P2 scalar DOFs are the mesh vertices
followed by the mesh edges; vector fields stack the two components
(``[u_x dofs, u_y dofs]``).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .mesh import Mesh
from .quadrature import QuadratureRule, make_rule

__all__ = [
    "P1", "P2", "P2_VECTOR", "P2_CONTROL",
    "DofMap", "FEField", "CellMaps",
    "eval_basis", "cell_maps", "interpolate", "prolong",
    "l2_project_elementwise", "norms",
]

P1 = "P1-scalar"
P2 = "P2-scalar"
P2_VECTOR = "P2-vector"
P2_CONTROL = "P2-vector-control"
_KINDS = (P1, P2, P2_VECTOR, P2_CONTROL)


def eval_basis(space_kind: str, points):
    """Reference basis values, gradients and Hessians.

    Parameters
    ----------
    space_kind : {"P1-scalar", "P2-scalar", "P2-vector", "P2-vector-control"}
        Vector kinds return the scalar component basis (6 functions).
    points : (Q, 2) reference coordinates

    Returns
    -------
    values : (Q, nb)
    gradients : (Q, nb, 2)
    hessians : (nb, 2, 2), constant on the reference cell
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    lam = np.stack([1 - x - y, x, y], axis=1)
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    Q = len(pts)
    if space_kind == P1:
        return lam, np.broadcast_to(dlam, (Q, 3, 2)).copy(), np.zeros((3, 2, 2))
    if space_kind not in _KINDS:
        raise ValueError(f"unknown space kind {space_kind!r}")
    vals = np.empty((Q, 6))
    grads = np.empty((Q, 6, 2))
    hess = np.empty((6, 2, 2))
    for i in range(3):
        vals[:, i] = lam[:, i] * (2 * lam[:, i] - 1)
        grads[:, i] = (4 * lam[:, i] - 1)[:, None] * dlam[i]
        hess[i] = 4 * np.outer(dlam[i], dlam[i])
    for k, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
        vals[:, 3 + k] = 4 * lam[:, i] * lam[:, j]
        grads[:, 3 + k] = 4 * (lam[:, j, None] * dlam[i] + lam[:, i, None] * dlam[j])
        hess[3 + k] = 4 * (np.outer(dlam[i], dlam[j]) + np.outer(dlam[j], dlam[i]))
    return vals, grads, hess


@dataclass(frozen=True, eq=False)
class CellMaps:
    """Affine maps x = x0 + J xhat of every cell."""

    x0: np.ndarray       # (M, 2)
    J: np.ndarray        # (M, 2, 2)
    Jinv: np.ndarray     # (M, 2, 2)
    detJ: np.ndarray     # (M,)

    def to_physical(self, ref_points) -> np.ndarray:
        """(M, Q, 2) physical coordinates of reference points."""
        return self.x0[:, None, :] + np.einsum("mij,qj->mqi", self.J, ref_points)

    def grads(self, ref_grads) -> np.ndarray:
        """Map (Q, nb, 2) reference gradients to (M, Q, nb, 2)."""
        return np.matmul(ref_grads[None, :, :, :], self.Jinv[:, None, :, :])

    def laplacians(self, ref_hess) -> np.ndarray:
        """(M, nb) physical Laplacians of basis functions with constant Hessians."""
        # H = J^-T Hhat J^-1, trace
        return np.einsum("mji,bjk,mki->mb", self.Jinv, ref_hess, self.Jinv)


def cell_maps(mesh: Mesh, cells=None) -> CellMaps:
    c = mesh.cells if cells is None else mesh.cells[cells]
    p = mesh.vertices[c]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if np.any(det <= 0):
        raise ValueError("degenerate or clockwise cell")
    Jinv = np.empty_like(J)
    Jinv[:, 0, 0] = J[:, 1, 1] / det
    Jinv[:, 1, 1] = J[:, 0, 0] / det
    Jinv[:, 0, 1] = -J[:, 0, 1] / det
    Jinv[:, 1, 0] = -J[:, 1, 0] / det
    return CellMaps(p[:, 0], J, Jinv, det)


class DofMap:
    """Global numbering of a Lagrange space on ``mesh``."""

    def __init__(self, mesh: Mesh, space_kind: str):
        if space_kind not in _KINDS:
            raise ValueError(f"unknown space kind {space_kind!r}")
        self.mesh = mesh
        self.space_kind = space_kind
        if space_kind == P1:
            self.cell_dofs = mesh.cells
            self.n_scalar = mesh.n_vertices
            self.n_components = 1
        else:
            self.cell_dofs = np.hstack([mesh.cells, mesh.n_vertices + mesh.cell_edges])
            self.n_scalar = mesh.n_vertices + mesh.n_edges
            self.n_components = 1 if space_kind == P2 else 2

    @property
    def degree(self) -> int:
        return 1 if self.space_kind == P1 else 2

    @property
    def n_dofs(self) -> int:
        return self.n_scalar * self.n_components

    @cached_property
    def coordinates(self) -> np.ndarray:
        """(n_scalar, 2) nodal coordinates."""
        v = self.mesh.vertices
        if self.space_kind == P1:
            return v
        e = self.mesh.edges
        return np.vstack([v, 0.5 * (v[e[:, 0]] + v[e[:, 1]])])

    @cached_property
    def boundary_scalar_dofs(self) -> np.ndarray:
        m = self.mesh
        bv = np.flatnonzero(m.boundary_vertices)
        if self.space_kind == P1:
            return bv
        return np.concatenate([bv, m.n_vertices + np.flatnonzero(m.boundary_edges)])

    @cached_property
    def boundary_dofs(self) -> np.ndarray:
        b = self.boundary_scalar_dofs
        return np.concatenate([b + k * self.n_scalar for k in range(self.n_components)])

    def component_dofs(self, k: int) -> np.ndarray:
        return self.cell_dofs + k * self.n_scalar


class FEField:
    """Coefficient vector over a :class:`DofMap`."""

    def __init__(self, dofmap: DofMap, coefficients=None):
        self.dofmap = dofmap
        if coefficients is None:
            coefficients = np.zeros(dofmap.n_dofs)
        c = np.asarray(coefficients, dtype=float)
        if c.shape != (dofmap.n_dofs,):
            raise ValueError(f"expected {dofmap.n_dofs} coefficients, got {c.shape}")
        self.coefficients = c

    @property
    def mesh(self) -> Mesh:
        return self.dofmap.mesh

    @property
    def is_vector(self) -> bool:
        return self.dofmap.n_components == 2

    def local(self) -> np.ndarray:
        """(M, nb) or (M, 2, nb) element coefficients."""
        dm = self.dofmap
        if not self.is_vector:
            return self.coefficients[dm.cell_dofs]
        return np.stack([self.coefficients[dm.component_dofs(k)] for k in range(2)], axis=1)

    def evaluate(self, ref_points, cells=None, maps: CellMaps | None = None):
        """Values and gradients at reference points of (a subset of) cells.

        ``ref_points`` is (Q, 2) shared by all cells or (M, Q, 2) per cell.
        Returns values (M, Q[, 2]) and gradients (M, Q[, 2], 2); for vector
        fields ``grad[..., i, j] = d u_i / d x_j``.
        """
        if maps is None:
            maps = cell_maps(self.mesh, cells)
        loc = self.local()
        if cells is not None:
            loc = loc[cells]
        ref_points = np.asarray(ref_points, dtype=float)
        if ref_points.ndim == 2:
            phi, dphi, _ = eval_basis(self.dofmap.space_kind, ref_points)
            g = maps.grads(dphi)
            if self.is_vector:
                vals = np.einsum("qb,mkb->mqk", phi, loc)
                grads = np.einsum("mqbj,mkb->mqkj", g, loc)
            else:
                vals = np.einsum("qb,mb->mq", phi, loc)
                grads = np.einsum("mqbj,mb->mqj", g, loc)
            return vals, grads
        M, Q, _ = ref_points.shape
        phi, dphi, _ = eval_basis(self.dofmap.space_kind, ref_points.reshape(-1, 2))
        phi = phi.reshape(M, Q, -1)
        dphi = dphi.reshape(M, Q, -1, 2)
        g = np.einsum("mqbj,mji->mqbi", dphi, maps.Jinv)
        if self.is_vector:
            return (np.einsum("mqb,mkb->mqk", phi, loc), np.einsum("mqbj,mkb->mqkj", g, loc))
        return np.einsum("mqb,mb->mq", phi, loc), np.einsum("mqbj,mb->mqj", g, loc)

    def laplacian(self, cells=None, maps: CellMaps | None = None) -> np.ndarray:
        """Elementwise constant Laplacian, (M[, 2])."""
        if maps is None:
            maps = cell_maps(self.mesh, cells)
        _, _, hess = eval_basis(self.dofmap.space_kind, np.zeros((1, 2)))
        lap = maps.laplacians(hess)
        loc = self.local()
        if cells is not None:
            loc = loc[cells]
        if self.is_vector:
            return np.einsum("mb,mkb->mk", lap, loc)
        return np.einsum("mb,mb->m", lap, loc)

    def __call__(self, x):
        """Point evaluation at physical points (slow path, used in tests)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cells, ref = locate(self.mesh, x)
        out = []
        for t, r in zip(cells, ref):
            v, _ = self.evaluate(r[None, :], cells=np.array([t]))
            out.append(v[0, 0])
        return np.array(out)


def locate(mesh: Mesh, x):
    """Cell containing each point and its reference coordinates."""
    maps = cell_maps(mesh)
    cells, refs = [], []
    for pt in np.atleast_2d(x):
        r = np.einsum("mij,mj->mi", maps.Jinv, pt - maps.x0)
        lam = np.column_stack([1 - r[:, 0] - r[:, 1], r])
        t = int(np.argmax(lam.min(axis=1)))
        if lam[t].min() < -1e-10:
            raise ValueError(f"point {pt} outside the mesh")
        cells.append(t)
        refs.append(r[t])
    return np.array(cells), np.array(refs)


def interpolate(dofmap: DofMap, func: Callable) -> FEField:
    """Nodal interpolation; ``func`` maps (n, 2) points to (n,) or (n, 2)."""
    vals = np.asarray(func(dofmap.coordinates), dtype=float)
    if dofmap.n_components == 2:
        vals = np.concatenate([vals[:, 0], vals[:, 1]])
    return FEField(dofmap, vals.reshape(-1))


def prolong(field: FEField, fine: DofMap) -> FEField:
    """Exact transfer of a field to a nested refinement.

    ``fine.mesh.parent`` must point into ``field.mesh``.
    """
    parent = fine.mesh.parent
    if parent is None or np.any(parent < 0) or len(parent) != fine.mesh.n_cells:
        raise ValueError("fine mesh does not carry ancestry into the coarse mesh")
    coarse_maps = cell_maps(field.mesh, parent)
    fine_maps = cell_maps(fine.mesh)
    _, nodes_ref = _local_nodes(fine.space_kind)
    x = fine_maps.to_physical(nodes_ref)                      # (M, nb, 2)
    ref = np.einsum("mij,mqj->mqi", coarse_maps.Jinv, x - coarse_maps.x0[:, None, :])
    vals, _ = field.evaluate(ref, cells=parent, maps=coarse_maps)
    out = np.zeros(fine.n_dofs)
    if fine.n_components == 2:
        for k in range(2):
            out[fine.component_dofs(k)] = vals[..., k]
    else:
        out[fine.cell_dofs] = vals
    return FEField(fine, out)


def _local_nodes(space_kind):
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    if space_kind == P1:
        return 3, v
    return 6, np.vstack([v, [[0.5, 0.5], [0.0, 0.5], [0.5, 0.0]]])


def l2_project_elementwise(g: Callable, mesh: Mesh, cells=None, rule: QuadratureRule | None = None):
    """Local L2 projection of ``g`` onto P2 on each cell.

    Returns the (M, 6[, 2]) local coefficients and the squared L2 norms of
    the residual ``g - Pi_T g`` on each cell.
    """
    rule = rule or make_rule(19)
    maps = cell_maps(mesh, cells)
    phi, _, _ = eval_basis(P2, rule.xy)
    x = maps.to_physical(rule.xy)
    gv = np.asarray(g(x.reshape(-1, 2)), dtype=float)
    vector = gv.ndim == 2
    gv = gv.reshape(x.shape[0], x.shape[1], -1)
    wq = rule.weights[None, :] * maps.detJ[:, None]          # (M, Q)
    # local mass matrix is the reference mass times detJ
    Mref = np.einsum("q,qa,qb->ab", rule.weights, phi, phi)
    rhs = np.einsum("mq,qa,mqk->mak", wq, phi, gv) / maps.detJ[:, None, None]
    coef = np.linalg.solve(Mref, rhs)                        # (M, 6, k)
    resid = gv - np.einsum("qa,mak->mqk", phi, coef)
    err2 = np.einsum("mq,mqk->m", wq, resid**2)
    if not vector:
        coef = coef[..., 0]
    return coef, err2


def norms(field: FEField | None, mesh: Mesh | None = None, rule: QuadratureRule | None = None,
          exact: Callable | None = None, exact_grad: Callable | None = None,
          other: FEField | None = None):
    """L2 norm and H1 seminorm of ``field - other - exact`` (terms optional).

    ``exact`` and ``exact_grad`` are analytic callables on (n, 2) points and
    enter with a minus sign; ``other`` must live on the same mesh.
    """
    if field is not None:
        mesh = field.mesh
    if other is not None and other.mesh is not mesh:
        raise ValueError("fields live on different meshes")
    if mesh is None:
        raise ValueError("need a field or a mesh")
    rule = rule or make_rule(19)
    maps = cell_maps(mesh)
    x = maps.to_physical(rule.xy)
    wq = rule.weights[None, :] * maps.detJ[:, None]
    val = grad = 0.0
    for f, sign in ((field, 1.0), (other, -1.0)):
        if f is not None:
            v, g = f.evaluate(rule.xy, maps=maps)
            val = val + sign * v
            grad = grad + sign * g
    if exact is not None:
        ev = np.asarray(exact(x.reshape(-1, 2)))
        val = val - ev.reshape(x.shape[:2] + ev.shape[1:])
    if exact_grad is not None:
        eg = np.asarray(exact_grad(x.reshape(-1, 2)))
        grad = grad - eg.reshape(x.shape[:2] + eg.shape[1:])
    val = np.broadcast_to(val, x.shape[:2] + np.shape(val)[2:]) if np.ndim(val) else np.zeros(x.shape[:2])
    sq = val**2 if val.ndim == 2 else (val**2).sum(axis=-1)
    l2 = float(np.sqrt(np.einsum("mq,mq->", wq, sq)))
    if np.ndim(grad) == 0:
        return l2, 0.0
    gsq = (np.asarray(grad) ** 2).reshape(grad.shape[0], grad.shape[1], -1).sum(axis=-1)
    return l2, float(np.sqrt(np.einsum("mq,mq->", wq, gsq)))
