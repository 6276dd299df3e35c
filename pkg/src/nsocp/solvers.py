"""Linear and nonlinear solvers for the state, adjoint and optimality systems.

Two discretizations of the control are supported:

``fully``
    continuous P2 control, box constraints enforced at control nodes,
    solved by a primal-dual active set loop around a Picard iteration;
``semi``
    control not discretized, recovered as ``clamp(-z/alpha)`` pointwise,
    solved by a semismooth Newton method.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres, splu

from .assembly import (
    SaddleSystem, apply_dirichlet, assemble_convection,
    assemble_convection_adjoint_jacobian, assemble_divergence, assemble_load,
    assemble_load_values, assemble_mass, assemble_viscous, eliminate, pressure_mean,
    _scatter,
)
from .mesh import Mesh
from .quadrature import make_rule
from .spaces import P1, P2, P2_CONTROL, P2_VECTOR, DofMap, FEField, cell_maps, eval_basis

__all__ = [
    "SolverError", "ProblemData", "OptimalitySolution", "SmallnessReport", "Discretization",
    "clamp", "project_control", "solve_saddle", "solve_state", "solve_adjoint",
    "active_set_solve", "newton_semidiscrete", "check_smallness", "control_rules",
    "QUADRATURE_VARIANTS",
]

log = logging.getLogger(__name__)

LINEAR_TOL = 1e-10
PICARD_TOL = 1e-11
PICARD_MAXIT = 50
# below this relative increment a stalled contraction is taken as converged
PICARD_STALL = 1e-8
NEWTON_TOL = 1e-10
NEWTON_MAXIT = 60
ACTIVE_SET_MAXIT = 30
QUADRATURE_VARIANTS = ("s19", "s5", "s5c")


class SolverError(RuntimeError):
    """Raised when a solve fails; ``info`` carries the diagnostic payload."""

    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info


@dataclass(frozen=True)
class ProblemData:
    """Data of the control problem.

    ``f`` and ``y_desired`` are callables on (n, 2) points returning
    (n, 2), or None for zero.  ``state_bc`` and ``adjoint_bc`` give the
    Dirichlet data (None for homogeneous).
    """

    nu: float = 1.0
    alpha: float = 1.0
    lower: tuple = (-np.inf, -np.inf)
    upper: tuple = (np.inf, np.inf)
    f: Callable | None = None
    y_desired: Callable | None = None
    state_bc: Callable | None = None
    adjoint_bc: Callable | None = None

    def __post_init__(self):
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (2,))
        up = np.broadcast_to(np.asarray(self.upper, dtype=float), (2,))
        object.__setattr__(self, "lower", tuple(lo))
        object.__setattr__(self, "upper", tuple(up))
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if np.any(lo > up):
            raise ValueError("lower bound exceeds upper bound")


def clamp(values, lower, upper):
    """Componentwise projection onto the box; last axis is the component."""
    return np.clip(values, np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))


def project_control(z, alpha, lower, upper):
    """``clamp(-z/alpha)``.

    A P2 vector field is projected at its nodes (returning a field on the
    same DOF map); arrays of shape (..., 2) are projected pointwise.
    """
    if isinstance(z, FEField):
        n = z.dofmap.n_scalar
        c = (-z.coefficients / alpha).reshape(2, n).T
        c = clamp(c, lower, upper)
        return FEField(z.dofmap, c.T.reshape(-1))
    return clamp(-np.asarray(z, dtype=float) / alpha, lower, upper)


class Discretization:
    """Operators and data vectors of one problem on one mesh."""

    def __init__(self, mesh: Mesh, data: ProblemData):
        self.mesh = mesh
        self.data = data
        self.V = DofMap(mesh, P2_VECTOR)
        self.P = DofMap(mesh, P1)
        self.U = DofMap(mesh, P2_CONTROL)
        self.nv = self.V.n_dofs
        self.np_ = self.P.n_dofs

    @cached_property
    def A(self):
        return assemble_viscous(self.mesh, self.V, self.data.nu)

    @cached_property
    def B(self):
        return assemble_divergence(self.mesh, self.V, self.P)

    @cached_property
    def m(self):
        return pressure_mean(self.mesh, self.P)

    @cached_property
    def M(self):
        return assemble_mass(self.mesh, self.V)

    @cached_property
    def load_f(self):
        if self.data.f is None:
            return np.zeros(self.nv)
        return assemble_load(self.mesh, self.V, self.data.f)

    @cached_property
    def load_yd(self):
        yd = self.data.y_desired
        if yd is None:
            return np.zeros(self.nv)
        if isinstance(yd, FEField):
            if yd.mesh is not self.mesh:
                raise ValueError("desired state lives on another mesh")
            return self.M @ yd.coefficients
        return assemble_load(self.mesh, self.V, yd)

    @property
    def fixed(self):
        return self.V.boundary_dofs

    def _bc(self, g):
        return apply_dirichlet(self._dummy_system, g).values

    @cached_property
    def _dummy_system(self):
        return SaddleSystem(self.V, self.P, None, None, None, None, None)

    @cached_property
    def state_bc(self):
        return self._bc(self.data.state_bc)

    @cached_property
    def adjoint_bc(self):
        return self._bc(self.data.adjoint_bc)

    @cached_property
    def measure(self):
        return float(self.mesh.areas.sum())

    def saddle_matrix(self, K):
        mcol = sp.csr_matrix(self.m[:, None])
        return sp.bmat([[K, -self.B.T, None], [-self.B, None, mcol], [None, mcol.T, None]],
                       format="csr")

    def ndof(self, scheme: str) -> int:
        base = 2 * (self.nv + self.np_)
        return base + self.U.n_dofs if scheme == "fully" else base


@dataclass(eq=False)
class OptimalitySolution:
    """Discrete optimal quintuple plus metadata.

    ``u`` is the P2 control for the fully discrete scheme and None for the
    semi-discrete scheme, where the control is ``clamp(-z/alpha)``.
    """

    y: FEField
    p: FEField
    z: FEField
    r: FEField
    u: FEField | None
    scheme: str
    data: ProblemData
    quadrature: str = "s19"
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def mesh(self) -> Mesh:
        return self.y.mesh

    def control_values(self, ref_points, cells=None, maps=None) -> np.ndarray:
        """Control at reference points of each cell, shape (M, Q, 2)."""
        if self.u is not None:
            return self.u.evaluate(ref_points, cells=cells, maps=maps)[0]
        zv, _ = self.z.evaluate(ref_points, cells=cells, maps=maps)
        return project_control(zv, self.data.alpha, self.data.lower, self.data.upper)


@dataclass(frozen=True)
class SmallnessReport:
    C_b: float
    C_2: float
    control_bound: float
    theta: float
    satisfied: bool


def check_smallness(data: ProblemData, measure: float) -> SmallnessReport:
    """Sufficient condition for uniqueness in two dimensions (informational)."""
    cb = np.sqrt(measure) / 2
    c2 = np.sqrt(measure) / np.sqrt(2)
    amp = np.maximum(np.abs(data.lower), np.abs(data.upper))
    bound = float(np.sqrt(measure) * np.linalg.norm(amp))
    theta = cb * c2 * bound / data.nu**2
    return SmallnessReport(float(cb), float(c2), bound, float(theta), bool(theta < 1))


# ---------------------------------------------------------------- linear algebra

def _lu_options(K) -> dict:
    """SuperLU ordering: minimum degree on A^T + A with relaxed pivoting for
    structurally symmetric matrices, COLAMD otherwise.  Iterative refinement
    in ``_solve`` recovers the accuracy lost to relaxed pivoting.
    """
    P = K.copy()
    P.data = np.ones_like(P.data)
    if (P - P.T).count_nonzero() == 0:
        return {"permc_spec": "MMD_AT_PLUS_A", "diag_pivot_thresh": 0.01}
    return {"permc_spec": "COLAMD"}


def _factor(K):
    try:
        return splu(K, **_lu_options(K))
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc


def _block_lower_solver(Ks, n1):
    """Exact inverse of the block lower-triangular part of ``Ks`` split at ``n1``.

    Returns ``(apply, exact)``; ``exact`` is True when the upper-right block is
    empty, so the block solve inverts ``Ks`` itself.
    """
    Ks = Ks.tocsr()
    K21 = Ks[n1:, :n1]
    lu1 = _factor(Ks[:n1, :n1].tocsc())
    lu2 = _factor(Ks[n1:, n1:].tocsc())

    def apply(r):
        x1 = lu1.solve(r[:n1])
        return np.concatenate([x1, lu2.solve(r[n1:] - K21 @ x1)])
    return apply, Ks[:n1, n1:].count_nonzero() == 0


def _refine(Ks, Fs, xs, apply):
    scale = max(np.linalg.norm(Fs), 1e-300)
    res = np.linalg.norm(Ks @ xs - Fs)
    for _ in range(3):
        if res <= LINEAR_TOL * scale:
            break
        xs = xs + apply(Fs - Ks @ xs)
        res = np.linalg.norm(Ks @ xs - Fs)
    ok = np.isfinite(res) and (res <= LINEAR_TOL * scale or res <= 1e-13)
    return xs, res, ok


def _solve(K, F, fixed, values, split=None):
    """Solve ``K x = F`` with ``x[fixed] = values`` by elimination.

    The reduced matrix is symmetrically equilibrated before factorization;
    strongly graded meshes otherwise lose most digits in the velocity.
    With ``split`` (first unknown of a second diagonal block) the two
    diagonal blocks are factored separately: block forward substitution when
    the upper-right block vanishes, otherwise GMRES preconditioned by the
    block lower-triangular part, with a monolithic factorization as fallback.
    """
    Kff, Ff, free = eliminate(K, F, fixed, values)
    d = np.sqrt(abs(Kff).max(axis=1).toarray().ravel())
    d[d == 0] = 1.0
    S = sp.diags(1.0 / d)
    Ks = (S @ Kff @ S).tocsc()
    Fs = Ff / d
    ok = False
    if split is not None:
        n1 = int(np.searchsorted(free, split))
        apply, exact = _block_lower_solver(Ks, n1)
        if exact:
            xs, res, ok = _refine(Ks, Fs, apply(Fs), apply)
        else:
            op = LinearOperator(Ks.shape, matvec=apply)
            xs, info = gmres(Ks, Fs, M=op, rtol=1e-13, atol=0.0, restart=60, maxiter=5)
            if info == 0:
                xs, res, ok = _refine(Ks, Fs, xs, apply)
        if not ok:
            log.info("block solve did not converge; factoring the coupled system")
    if not ok:
        lu = _factor(Ks)
        xs, res, ok = _refine(Ks, Fs, lu.solve(Fs), lu.solve)
    if not ok:
        raise SolverError(f"linear solve residual {res:.3e} above tolerance", residual=res)
    x = np.zeros(K.shape[0])
    x[free] = xs / d
    x[fixed] = values
    return x


def solve_saddle(system: SaddleSystem):
    """Solve a velocity-pressure system; returns ``(velocity, pressure)``."""
    nv = system.velocity.n_dofs
    fixed = system.fixed if system.fixed is not None else np.zeros(0, dtype=int)
    values = system.values if system.values is not None else np.zeros(0)
    x = _solve(system.matrix(), system.rhs(), fixed, values)
    return (FEField(system.velocity, x[:nv]),
            FEField(system.pressure, x[nv:nv + system.pressure.n_dofs]))


def _h1(disc: Discretization, vec) -> float:
    return float(np.sqrt(max(vec @ (disc.A @ vec), 0.0) / disc.data.nu))


def _picard_done(inc, prev, size) -> bool:
    """Increment small enough, or contraction stalled at the rounding floor."""
    scale = max(1.0, size)
    if inc <= PICARD_TOL * scale:
        return True
    return inc <= PICARD_STALL * scale and inc > 0.5 * prev


def _control_load(disc: Discretization, control) -> np.ndarray:
    if control is None:
        return np.zeros(disc.nv)
    if isinstance(control, FEField):
        return disc.M @ control.coefficients
    if callable(control):
        return assemble_load(disc.mesh, disc.V, control)
    c = np.asarray(control, dtype=float)
    if c.shape == (2,):
        return disc.M @ np.repeat(c, disc.V.n_scalar)
    return disc.M @ c


def solve_state(data: ProblemData, control, mesh: Mesh, y0: FEField | None = None,
                disc: Discretization | None = None):
    """Picard iteration for the discrete Navier-Stokes state.

    Returns ``(y, p, iterations)``.
    """
    disc = disc or Discretization(mesh, data)
    rep = check_smallness(data, disc.measure)
    if not rep.satisfied:
        log.debug("smallness condition not met: theta=%.3e", rep.theta)
    rhs = np.concatenate([disc.load_f + _control_load(disc, control), np.zeros(disc.np_ + 1)])
    y = y0.coefficients.copy() if y0 is not None else np.zeros(disc.nv)
    inc = np.inf
    for it in range(1, PICARD_MAXIT + 1):
        N1, _ = assemble_convection(mesh, disc.V, FEField(disc.V, y))
        x = _solve(disc.saddle_matrix(disc.A + N1), rhs, disc.fixed, disc.state_bc)
        ynew = x[:disc.nv]
        prev, inc = inc, _h1(disc, ynew - y)
        y = ynew
        log.debug("picard iter=%d increment=%.3e", it, inc)
        if _picard_done(inc, prev, _h1(disc, y)):
            return FEField(disc.V, y), FEField(disc.P, x[disc.nv:disc.nv + disc.np_]), it
    raise SolverError(f"Picard iteration did not converge in {PICARD_MAXIT} steps",
                      increment=inc)


def _adjoint_operator(disc: Discretization, y: FEField):
    N1, N2 = assemble_convection(disc.mesh, disc.V, y)
    return disc.A + N1.T + N2.T


def solve_adjoint(data: ProblemData, y: FEField, mesh: Mesh,
                  disc: Discretization | None = None):
    """Linear adjoint solve for a given state; returns ``(z, r)``."""
    disc = disc or Discretization(mesh, data)
    F = disc.M @ y.coefficients - disc.load_yd
    rhs = np.concatenate([F, np.zeros(disc.np_ + 1)])
    x = _solve(disc.saddle_matrix(_adjoint_operator(disc, y)), rhs, disc.fixed, disc.adjoint_bc)
    return FEField(disc.V, x[:disc.nv]), FEField(disc.P, x[disc.nv:disc.nv + disc.np_])


# ---------------------------------------------------------------- fully discrete

def _unpack(disc: Discretization, x):
    nv, npr = disc.nv, disc.np_
    o = nv + npr + 1
    return (FEField(disc.V, x[:nv]), FEField(disc.P, x[nv:nv + npr]),
            FEField(disc.V, x[o:o + nv]), FEField(disc.P, x[o + nv:o + nv + npr]))


def _active_sets(disc: Discretization, z: np.ndarray):
    """Masks of control DOFs at the upper and lower bound, from ``-z/alpha``."""
    d = disc.data
    n = disc.V.n_scalar
    w = (-z / d.alpha).reshape(2, n)
    up = w > np.asarray(d.upper)[:, None]
    lo = w < np.asarray(d.lower)[:, None]
    return up.reshape(-1), lo.reshape(-1)


def _coupled_fixed(disc: Discretization):
    o = disc.nv + disc.np_ + 1
    fixed = np.concatenate([disc.fixed, o + disc.fixed])
    values = np.concatenate([disc.state_bc, disc.adjoint_bc])
    return fixed, values


def active_set_solve(data: ProblemData, mesh: Mesh, init: OptimalitySolution | None = None,
                     disc: Discretization | None = None) -> OptimalitySolution:
    """Primal-dual active set method for the fully discrete scheme.

    The control is eliminated: on inactive nodes ``u = -z/alpha``, on active
    nodes it sits at the bound.  For fixed sets the coupled state-adjoint
    system is solved by freezing the convection at the previous state.
    The loop stops when the active sets repeat.
    """
    disc = disc or Discretization(mesh, data)
    nv, npr = disc.nv, disc.np_
    n = disc.V.n_scalar
    o = nv + npr + 1
    fixed, values = _coupled_fixed(disc)
    bounds_up = np.repeat(np.asarray(data.upper), n)
    bounds_lo = np.repeat(np.asarray(data.lower), n)

    if init is not None:
        y, z = init.y, init.z
        p, r = init.p, init.r
    else:
        # initial sets from the state and adjoint of the projected zero guess
        u0 = project_control(FEField(disc.V), data.alpha, data.lower, data.upper)
        y, p, _ = solve_state(data, u0, mesh, disc=disc)
        z, r = solve_adjoint(data, y, mesh, disc=disc)
    up, lo = _active_sets(disc, z.coefficients)
    history = []
    trace = []
    x = np.concatenate([y.coefficients, p.coefficients, [0.0], z.coefficients, r.coefficients, [0.0]])
    for outer in range(1, ACTIVE_SET_MAXIT + 1):
        act = up | lo
        inact = ~act
        u_act = np.where(up, bounds_up, np.where(lo, bounds_lo, 0.0))
        Minact = disc.M @ sp.diags(inact.astype(float))
        F_state = disc.load_f + disc.M @ u_act
        rhs = np.concatenate([F_state, np.zeros(npr + 1), -disc.load_yd, np.zeros(npr + 1)])
        ycur = x[:nv]
        inc = np.inf
        for inner in range(1, PICARD_MAXIT + 1):
            N1, N2 = assemble_convection(mesh, disc.V, FEField(disc.V, ycur))
            mcol = sp.csr_matrix(disc.m[:, None])
            K = sp.bmat([
                [disc.A + N1, -disc.B.T, None, Minact / data.alpha, None, None],
                [-disc.B, None, mcol, None, None, None],
                [None, mcol.T, None, None, None, None],
                [-disc.M, None, None, disc.A + N1.T + N2.T, -disc.B.T, None],
                [None, None, None, -disc.B, None, mcol],
                [None, None, None, None, mcol.T, None],
            ], format="csr")
            x = _solve(K, rhs, fixed, values, split=o)
            prev, inc = inc, _h1(disc, x[:nv] - ycur)
            ycur = x[:nv]
            log.debug("active-set outer=%d picard=%d increment=%.3e", outer, inner, inc)
            if _picard_done(inc, prev, _h1(disc, ycur)):
                break
        else:
            raise SolverError("inner Picard loop did not converge", increment=inc, outer=outer)
        z_new = x[o:o + nv]
        new_up, new_lo = _active_sets(disc, z_new)
        changed = int(np.sum(new_up != up) + np.sum(new_lo != lo))
        history.append({"outer": outer, "picard": inner, "active": int(np.sum(new_up | new_lo)),
                        "changed": changed})
        trace.append(changed)
        log.info("active-set iter=%d active=%d changed=%d picard=%d",
                 outer, int(np.sum(new_up | new_lo)), changed, inner)
        if changed == 0:
            u = np.where(up, bounds_up, np.where(lo, bounds_lo, -z_new / data.alpha))
            y, p, z, r = _unpack(disc, x)
            return OptimalitySolution(y, p, z, r, FEField(disc.U, u), "fully", data,
                                      iterations=outer, history=history)
        up, lo = new_up, new_lo
    raise SolverError(f"active sets still changing after {ACTIVE_SET_MAXIT} iterations",
                      trace=trace)


# ---------------------------------------------------------------- semi discrete

def control_rules(variant: str, z: FEField, data: ProblemData):
    """Cell groups and quadrature rules used for the control term.

    Returns a list of ``(cells, rule)``.  ``s5c`` uses the degree-5 rule on
    cells where the inactive indicator changes between degree-5 points
    (kink cells) and the degree-19 rule elsewhere.
    """
    variant = variant.lower()
    M = z.mesh.n_cells
    if variant == "s19":
        return [(np.arange(M), make_rule(19))]
    if variant == "s5":
        return [(np.arange(M), make_rule(5))]
    if variant != "s5c":
        raise ValueError(f"unknown quadrature variant {variant!r}")
    r5 = make_rule(5)
    zv, _ = z.evaluate(r5.xy)
    w = -zv / data.alpha
    inactive = (w <= np.asarray(data.upper)) & (w >= np.asarray(data.lower))
    kink = np.any(inactive != inactive[:, :1, :], axis=(1, 2))
    groups = [(np.flatnonzero(~kink), make_rule(19)), (np.flatnonzero(kink), r5)]
    return [(c, r) for c, r in groups if len(c)]


def _clamp_terms(disc: Discretization, z: FEField, variant: str):
    """Load ``int clamp(-z/alpha) . phi_i`` and its derivative in ``z``."""
    data = disc.data
    G = np.zeros(disc.nv)
    n = disc.V.n_scalar
    blocks = [sp.csr_matrix((n, n)), sp.csr_matrix((n, n))]
    for cells, rule in control_rules(variant, z, data):
        maps = cell_maps(disc.mesh, cells)
        zv, _ = z.evaluate(rule.xy, cells=cells, maps=maps)
        w = -zv / data.alpha
        g = clamp(w, data.lower, data.upper)
        G += assemble_load_values(disc.mesh, disc.V, g, rule, cells)
        inactive = ((w <= np.asarray(data.upper)) & (w >= np.asarray(data.lower))).astype(float)
        phi, _, _ = eval_basis(P2, rule.xy)
        wq = rule.weights[None, :] * maps.detJ[:, None]
        cd = disc.V.cell_dofs[cells]
        for k in range(2):
            loc = np.einsum("mq,qa,qb->mab", wq * inactive[..., k], phi, phi)
            blocks[k] = blocks[k] + _scatter(loc, cd, cd, (n, n))
    dG = sp.block_diag(blocks, format="csr") * (-1.0 / data.alpha)
    return G, dG


def _semi_residual(disc, x, variant, picard=False):
    """Residual and Jacobian of the semi-discrete optimality system."""
    nv, npr = disc.nv, disc.np_
    o = nv + npr + 1
    yv, p, lam = x[:nv], x[nv:nv + npr], x[nv + npr]
    zv, r, mu = x[o:o + nv], x[o + nv:o + nv + npr], x[o + nv + npr]
    y, z = FEField(disc.V, yv), FEField(disc.V, zv)
    N1, N2 = assemble_convection(disc.mesh, disc.V, y)
    G, dG = _clamp_terms(disc, z, variant)
    Aadj = disc.A + N1.T + N2.T
    res = np.concatenate([
        (disc.A + N1) @ yv - disc.B.T @ p - G - disc.load_f,
        -disc.B @ yv + disc.m * lam,
        [disc.m @ p],
        Aadj @ zv - disc.B.T @ r - disc.M @ yv + disc.load_yd,
        -disc.B @ zv + disc.m * mu,
        [disc.m @ r],
    ])
    mcol = sp.csr_matrix(disc.m[:, None])
    if picard:
        Jyy, Jzy = disc.A + N1, -disc.M
    else:
        K1 = assemble_convection_adjoint_jacobian(disc.mesh, disc.V, z)
        Jyy, Jzy = disc.A + N1 + N2, K1 + K1.T - disc.M
    J = sp.bmat([
        [Jyy, -disc.B.T, None, -dG, None, None],
        [-disc.B, None, mcol, None, None, None],
        [None, mcol.T, None, None, None, None],
        [Jzy, None, None, Aadj, -disc.B.T, None],
        [None, None, None, -disc.B, None, mcol],
        [None, None, None, None, mcol.T, None],
    ], format="csr")
    return res, J


def newton_semidiscrete(data: ProblemData, mesh: Mesh, init: OptimalitySolution | None = None,
                        quadrature: str = "s19",
                        disc: Discretization | None = None) -> OptimalitySolution:
    """Semismooth Newton method for the variationally discretized problem."""
    disc = disc or Discretization(mesh, data)
    nv, npr = disc.nv, disc.np_
    o = nv + npr + 1
    fixed, values = _coupled_fixed(disc)
    free = np.ones(2 * o, dtype=bool)
    free[fixed] = False
    x = np.zeros(2 * o)
    if init is not None:
        x[:nv], x[nv:nv + npr] = init.y.coefficients, init.p.coefficients
        x[o:o + nv], x[o + nv:o + nv + npr] = init.z.coefficients, init.r.coefficients
    x[fixed] = values
    scale = max(1.0, np.linalg.norm(np.concatenate([disc.load_f, disc.load_yd])))
    history = []
    growth = 0
    picard_left = 0
    fallbacks = 0
    for it in range(1, NEWTON_MAXIT + 1):
        use_picard = picard_left > 0
        res, J = _semi_residual(disc, x, quadrature, picard=use_picard)
        rn = float(np.linalg.norm(res[free]))
        history.append(rn)
        log.info("newton iter=%d residual=%.3e%s", it, rn, " (picard)" if use_picard else "")
        if rn <= NEWTON_TOL * scale:
            y, p, z, r = _unpack(disc, x)
            return OptimalitySolution(y, p, z, r, None, "semi", data, quadrature=quadrature,
                                      iterations=it - 1, history=history)
        if len(history) > 1 and rn > history[-2]:
            growth += 1
        else:
            growth = 0
        if growth >= 5:
            if fallbacks >= 2:
                raise SolverError("Newton iteration diverges", history=history)
            fallbacks += 1
            picard_left, growth = 10, 0
        dx = _solve(J, -res, fixed, np.zeros(len(fixed)))
        x = x + dx
        picard_left = max(0, picard_left - 1)
    raise SolverError(f"Newton did not converge in {NEWTON_MAXIT} steps", history=history)
