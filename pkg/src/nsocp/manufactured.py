"""Exact solutions, derived data and error evaluation for benchmark problems.

``example1`` is a corner-singular flow on the L-shaped domain built from a
stream function ``rho^(1+s) psi(theta)``; ``poly2d`` is a polynomial problem
on the unit square whose solution lies in the Taylor-Hood spaces.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .mesh import Mesh, l_shape, refine_uniform, unit_square
from .quadrature import make_rule
from .solvers import OptimalitySolution, ProblemData, clamp
from .spaces import cell_maps

__all__ = [
    "PolarSeries", "ExactSolution", "example1", "poly2d", "verify_manufactured",
    "ResidualReport", "ErrorBundle", "exact_errors", "active_set_boundary",
    "write_polylines", "SIGMA", "GAMMA",
]

SIGMA = 856399 / 1572864
GAMMA = 3 * np.pi / 2


def polar(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rho = np.hypot(x[:, 0], x[:, 1])
    theta = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
    return rho, theta


class PolarSeries:
    """``rho^m * sum_k (a_k cos(w_k theta) + b_k sin(w_k theta))``.

    Closed under Cartesian differentiation, which lowers ``m`` by one.
    """

    def __init__(self, m, omegas, a, b):
        self.m = float(m)
        self.omegas = np.asarray(omegas, dtype=float)
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def angular(self, theta):
        wt = np.multiply.outer(theta, self.omegas)
        return np.cos(wt) @ self.a + np.sin(wt) @ self.b

    def __call__(self, x):
        rho, theta = polar(x)
        if self.m < 0 and np.any(rho == 0):
            raise ValueError("singular function evaluated at the origin")
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = np.where(rho == 0, 0.0 if self.m > 0 else 1.0, rho ** self.m)
        return radial * self.angular(theta)

    def __add__(self, other):
        if other.m != self.m:
            raise ValueError("radial exponents differ")
        return PolarSeries(self.m, np.concatenate([self.omegas, other.omegas]),
                           np.concatenate([self.a, other.a]), np.concatenate([self.b, other.b]))

    def __mul__(self, c):
        return PolarSeries(self.m, self.omegas, c * self.a, c * self.b)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def with_exponent(self, m):
        return PolarSeries(m, self.omegas, self.a, self.b)

    def dtheta(self, times=1):
        out = self
        for _ in range(times):
            out = PolarSeries(out.m, out.omegas, out.omegas * out.b, -out.omegas * out.a)
        return out

    def dx(self):
        m, w, a, b = self.m, self.omegas, self.a, self.b
        lo, hi = (m + w) / 2, (m - w) / 2
        return PolarSeries(m - 1, np.concatenate([w - 1, w + 1]),
                           np.concatenate([lo * a, hi * a]), np.concatenate([lo * b, hi * b]))

    def dy(self):
        m, w, a, b = self.m, self.omegas, self.a, self.b
        lo, hi = (m + w) / 2, (m - w) / 2
        # cos terms feed sines, sin terms feed cosines
        return PolarSeries(m - 1, np.concatenate([w - 1, w + 1]),
                           np.concatenate([lo * b, -hi * b]), np.concatenate([-lo * a, hi * a]))


class PolarBank:
    """Evaluate several series at once, sharing the trigonometric work."""

    def __init__(self, series):
        self.series = list(series)
        om = np.concatenate([s.omegas for s in self.series])
        self.omegas, inv = np.unique(np.round(om, 12), return_inverse=True)
        self.A = np.zeros((len(self.series), len(self.omegas)))
        self.B = np.zeros_like(self.A)
        pos = 0
        for k, s in enumerate(self.series):
            idx = inv[pos:pos + len(s.omegas)]
            np.add.at(self.A[k], idx, s.a)
            np.add.at(self.B[k], idx, s.b)
            pos += len(s.omegas)
        self.m = np.array([s.m for s in self.series])

    def __call__(self, x):
        """(n, len(series)) values."""
        rho, theta = polar(x)
        if np.any(self.m < 0) and np.any(rho == 0):
            raise ValueError("singular function evaluated at the origin")
        wt = np.multiply.outer(theta, self.omegas)
        ang = np.cos(wt) @ self.A.T + np.sin(wt) @ self.B.T
        with np.errstate(divide="ignore", invalid="ignore"):
            logr = np.log(rho)
            radial = np.exp(np.multiply.outer(logr, self.m))
        radial[rho == 0] = np.where(self.m > 0, 0.0, 1.0)
        return radial * ang


def _bank(*fs):
    bank = PolarBank(fs)
    return lambda x: bank(x)


@dataclass
class ExactSolution:
    """Analytic optimal quintuple with first and second derivatives.

    Velocity callables return (n, 2), gradients (n, 2, 2) with
    ``[..., i, j] = d_j v_i``, pressures (n,).
    """

    y: Callable
    grad_y: Callable
    lap_y: Callable
    p: Callable
    grad_p: Callable
    z: Callable
    grad_z: Callable
    lap_z: Callable
    r: Callable
    grad_r: Callable
    params: dict = field(default_factory=dict)
    mesh0: Callable = unit_square

    def control(self, x, data: ProblemData):
        return clamp(-self.z(x) / data.alpha, data.lower, data.upper)

    def forcing(self, data: ProblemData) -> Callable:
        """Momentum source so that the exact pair solves the state equation."""
        def f(x):
            y, gy = self.y(x), self.grad_y(x)
            return (-data.nu * self.lap_y(x) + np.einsum("nij,nj->ni", gy, y)
                    + self.grad_p(x) - self.control(x, data))
        return f

    def desired_state(self, data: ProblemData) -> Callable:
        """Target so that the exact pair solves the adjoint equation."""
        def yd(x):
            y, z = self.y(x), self.z(x)
            return (y + data.nu * self.lap_z(x) + np.einsum("nij,nj->ni", self.grad_z(x), y)
                    - np.einsum("nji,nj->ni", self.grad_y(x), z) - self.grad_r(x))
        return yd


def example1(alpha=1e-4, nu=1.0, lower=(-2.0, -2.0), upper=(2.0, 2.0), scale=1e-2,
             shift=(2.0, 2.0)):
    """Corner-singular solution on the L-shaped domain.

    Returns ``(exact, data)``; the forcing and target are derived so that the
    exact fields solve the optimality system.
    """
    s = SIGMA
    w1, w2 = 1 + s, s - 1
    c = np.cos(GAMMA * s)
    psi = PolarSeries(0.0, [w1, w2], [-1.0, 1.0], [c / w1, c / w2])
    stream = scale * psi.with_exponent(1 + s)
    y1, y2 = stream.dy(), -stream.dx()
    pres = ((w1**2) * psi.dtheta() + psi.dtheta(3)).with_exponent(s - 1) * (1 / (1 - s))
    grads = [[y1.dx(), y1.dy()], [y2.dx(), y2.dy()]]
    laps = [grads[0][0].dx() + grads[0][1].dy(), grads[1][0].dx() + grads[1][1].dy()]
    shift = np.asarray(shift, dtype=float)

    y = _bank(y1, y2)
    gbank = _bank(*grads[0], *grads[1])
    grad_y = lambda x: gbank(x).reshape(-1, 2, 2)
    lap_y = _bank(*laps)
    p = pres
    grad_p = _bank(pres.dx(), pres.dy())
    exact = ExactSolution(
        y=y, grad_y=grad_y, lap_y=lap_y, p=p, grad_p=grad_p,
        z=lambda x: y(x) - shift, grad_z=grad_y, lap_z=lap_y, r=p, grad_r=grad_p,
        params={"name": "example1", "sigma": s, "gamma": GAMMA, "scale": scale,
                "psi": psi, "stream": stream},
        mesh0=l_shape,
    )
    base = ProblemData(nu=nu, alpha=alpha, lower=lower, upper=upper)
    data = ProblemData(nu=nu, alpha=alpha, lower=lower, upper=upper,
                       f=exact.forcing(base), y_desired=exact.desired_state(base),
                       state_bc=exact.y, adjoint_bc=exact.z)
    return exact, data


def poly2d(alpha=1.0, nu=1.0, lower=(-10.0, -10.0), upper=(10.0, 10.0)):
    """Polynomial solution in the Taylor-Hood spaces on the unit square.

    ``y = (x^2, -2xy)``, ``p = x + y - 1``, ``z = (y^2, x^2)``, ``r = x - y``.
    """
    def y(x):
        return np.column_stack([x[:, 0] ** 2, -2 * x[:, 0] * x[:, 1]])

    def grad_y(x):
        X, Y = x[:, 0], x[:, 1]
        return np.stack([np.column_stack([2 * X, 0 * X]), np.column_stack([-2 * Y, -2 * X])], axis=1)

    def z(x):
        return np.column_stack([x[:, 1] ** 2, x[:, 0] ** 2])

    def grad_z(x):
        X, Y = x[:, 0], x[:, 1]
        return np.stack([np.column_stack([0 * X, 2 * Y]), np.column_stack([2 * X, 0 * X])], axis=1)

    exact = ExactSolution(
        y=y, grad_y=grad_y, lap_y=lambda x: np.tile([2.0, 0.0], (len(x), 1)),
        p=lambda x: x[:, 0] + x[:, 1] - 1, grad_p=lambda x: np.ones((len(x), 2)),
        z=z, grad_z=grad_z, lap_z=lambda x: np.tile([2.0, 2.0], (len(x), 1)),
        r=lambda x: x[:, 0] - x[:, 1], grad_r=lambda x: np.tile([1.0, -1.0], (len(x), 1)),
        params={"name": "poly2d"}, mesh0=unit_square,
    )
    base = ProblemData(nu=nu, alpha=alpha, lower=lower, upper=upper)
    data = ProblemData(nu=nu, alpha=alpha, lower=lower, upper=upper,
                       f=exact.forcing(base), y_desired=exact.desired_state(base),
                       state_bc=exact.y, adjoint_bc=exact.z)
    return exact, data


# ---------------------------------------------------------------- weak residual gate

@dataclass
class ResidualReport:
    state: np.ndarray           # relative residual per test function
    adjoint: np.ndarray
    tol: float

    @property
    def max_state(self) -> float:
        return float(np.max(self.state))

    @property
    def max_adjoint(self) -> float:
        return float(np.max(self.adjoint))

    @property
    def passed(self) -> bool:
        return self.max_state <= self.tol and self.max_adjoint <= self.tol


def _bumps(mesh: Mesh, n: int, seed: int, min_radius: float = 0.2):
    """Random smooth bumps ``(1 - |x - c|^2 / R^2)^k`` inside the domain."""
    rng = np.random.default_rng(seed)
    e = mesh.edges[mesh.boundary_edges]
    a, b = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    out = []
    while len(out) < n:
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        c = rng.uniform(lo, hi)
        # distance to the boundary polyline
        t = np.clip(np.einsum("ij,ij->i", c - a, b - a) / np.einsum("ij,ij->i", b - a, b - a), 0, 1)
        d = np.min(np.linalg.norm(a + t[:, None] * (b - a) - c, axis=1))
        inside = _inside(mesh, c)
        if not inside or d < min_radius:
            continue
        R = rng.uniform(min_radius, d)
        out.append((c, R, rng.standard_normal(2)))
    return out


def _inside(mesh: Mesh, pt) -> bool:
    maps = cell_maps(mesh)
    r = np.einsum("mij,mj->mi", maps.Jinv, pt - maps.x0)
    lam = np.column_stack([1 - r[:, 0] - r[:, 1], r])
    return bool(np.any(lam.min(axis=1) > 0))


def verify_manufactured(exact: ExactSolution, data: ProblemData, n_tests: int = 20,
                        seed: int = 0, refinements: int = 8, tol: float = 1e-6,
                        f: Callable | None = None, y_desired: Callable | None = None,
                        power: int = 8) -> ResidualReport:
    """Weak residuals of the exact fields against random smooth test functions.

    For each bump ``v = e * phi`` (``e`` a random direction) computes

    * state: ``nu(grad y, grad v) + ((y.grad)y, v) - (p, div v) - (f + u, v)``
    * adjoint: ``nu(grad z, grad v) + ((y.grad)v, z) + ((v.grad)y, z)
      - (r, div v) - (y - y_d, v)``

    relative to the sum of the absolute values of the individual terms.
    ``f`` and ``y_desired`` default to those carried by ``data``.
    """
    f = f or data.f or (lambda x: np.zeros((len(x), 2)))
    yd = y_desired or data.y_desired or (lambda x: np.zeros((len(x), 2)))
    mesh = refine_uniform(exact.mesh0(), refinements)
    rule = make_rule(19)
    maps = cell_maps(mesh)
    x = maps.to_physical(rule.xy).reshape(-1, 2)
    w = (rule.weights[None, :] * maps.detJ[:, None]).reshape(-1)
    y, gy, p = exact.y(x), exact.grad_y(x), exact.p(x)
    z, gz, r = exact.z(x), exact.grad_z(x), exact.r(x)
    u = exact.control(x, data)
    fv, ydv = f(x), yd(x)
    conv_y = np.einsum("nij,nj->ni", gy, y)
    st, ad = [], []
    for c, R, e in _bumps(mesh, n_tests, seed):
        d = x - c
        s2 = np.einsum("ni,ni->n", d, d) / R**2
        base = np.clip(1 - s2, 0, None)
        phi = base**power
        dphi = (-2 * power * base ** (power - 1) / R**2)[:, None] * d
        v = phi[:, None] * e
        gv = e[None, :, None] * dphi[:, None, :]            # [n, i, j] = d_j v_i
        div_v = np.einsum("nii->n", gv)
        terms_s = [
            data.nu * np.einsum("nij,nij->n", gy, gv),
            np.einsum("ni,ni->n", conv_y, v),
            -p * div_v,
            -np.einsum("ni,ni->n", fv + u, v),
        ]
        terms_a = [
            data.nu * np.einsum("nij,nij->n", gz, gv),
            np.einsum("nij,nj,ni->n", gv, y, z),
            np.einsum("nij,nj,ni->n", gy, v, z),
            -r * div_v,
            -np.einsum("ni,ni->n", y - ydv, v),
        ]
        for terms, out in ((terms_s, st), (terms_a, ad)):
            ints = np.array([w @ t for t in terms])
            out.append(abs(ints.sum()) / max(np.abs(ints).sum(), 1e-300))
    return ResidualReport(np.array(st), np.array(ad), tol)


# ---------------------------------------------------------------- errors

@dataclass
class ErrorBundle:
    y_h1: float
    p_l2: float
    z_h1: float
    r_l2: float
    u_l2: float

    @property
    def total(self) -> float:
        return float(np.sqrt(self.y_h1**2 + self.p_l2**2 + self.z_h1**2
                             + self.r_l2**2 + self.u_l2**2))

    def effectivity(self, estimator: float) -> float:
        return float(estimator / self.total) if self.total > 0 else float("inf")


def _mean_free_l2(wq, e):
    """L2 norm of ``e`` after removing its mean (pressures are defined up to constants)."""
    area = wq.sum()
    mean = np.sum(wq * e) / area
    return float(np.sqrt(max(np.sum(wq * (e - mean) ** 2), 0.0)))


def exact_errors(solution: OptimalitySolution, exact: ExactSolution, mesh: Mesh | None = None,
                 rule=None) -> ErrorBundle:
    """Error contributions by degree-19 quadrature.

    Pressure errors are measured modulo constants.  For the semi-discrete
    scheme the control is ``clamp(-z/alpha)`` at each quadrature point.
    """
    mesh = mesh or solution.mesh
    rule = rule or make_rule(19)
    maps = cell_maps(mesh)
    x = maps.to_physical(rule.xy)
    M, Q = x.shape[:2]
    pts = x.reshape(-1, 2)
    wq = rule.weights[None, :] * maps.detJ[:, None]

    def grad_err(field, g):
        _, gh = field.evaluate(rule.xy, maps=maps)
        d = gh - g(pts).reshape(M, Q, 2, 2)
        return float(np.sqrt(np.sum(wq[..., None, None] * d**2)))

    def scalar_err(field, s):
        vh, _ = field.evaluate(rule.xy, maps=maps)
        return _mean_free_l2(wq, vh - s(pts).reshape(M, Q))

    uh = solution.control_values(rule.xy, maps=maps)
    ue = exact.control(pts, solution.data).reshape(M, Q, 2)
    eu = float(np.sqrt(np.sum(wq[..., None] * (uh - ue) ** 2)))
    return ErrorBundle(grad_err(solution.y, exact.grad_y), scalar_err(solution.p, exact.p),
                       grad_err(solution.z, exact.grad_z), scalar_err(solution.r, exact.r), eu)


# ---------------------------------------------------------------- active-set boundaries

def _sub_triangulation(n):
    """Points (barycentric-free reference xy) and triangles of a uniform subdivision."""
    idx = {}
    pts = []
    for j in range(n + 1):
        for i in range(n + 1 - j):
            idx[i, j] = len(pts)
            pts.append((i / n, j / n))
    tris = []
    for j in range(n):
        for i in range(n - j):
            tris.append((idx[i, j], idx[i + 1, j], idx[i, j + 1]))
            if i + j < n - 1:
                tris.append((idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]))
    return np.array(pts), np.array(tris)


def active_set_boundary(field, alpha: float, lower, upper, mesh: Mesh | None = None,
                        samples: int = 4, is_adjoint: bool = True):
    """Zero level sets of ``argument - bound`` for each component and bound.

    ``field`` is an FEField (P2 vector) or an analytic callable on (n, 2)
    points.  With ``is_adjoint`` the clamp argument is ``-field/alpha``,
    otherwise the field itself.  Returns a list of
    ``(component, bound, segments)`` with ``segments`` of shape (S, 2, 2);
    bounds that are never crossed are omitted.
    """
    if mesh is None:
        mesh = field.mesh
    ref, tris = _sub_triangulation(samples)
    maps = cell_maps(mesh)
    x = maps.to_physical(ref)                                  # (M, P, 2)
    if callable(field) and not hasattr(field, "dofmap"):
        vals = np.asarray(field(x.reshape(-1, 2))).reshape(x.shape[0], x.shape[1], 2)
    else:
        vals, _ = field.evaluate(ref, maps=maps)
    arg = -vals / alpha if is_adjoint else vals
    out = []
    for k in range(2):
        for name, bound in (("lower", lower[k]), ("upper", upper[k])):
            if not np.isfinite(bound):
                continue
            g = arg[..., k] - bound
            segs = _contour(x, g, tris)
            if len(segs):
                out.append((k, name, segs))
    return out


def _contour(x, g, tris):
    """Piecewise-linear zero set of nodal values ``g`` on sub-triangles."""
    segs = []
    gt = g[:, tris]                                            # (M, S, 3)
    xt = x[:, tris]                                            # (M, S, 3, 2)
    sign = gt > 0
    cross = np.any(sign, axis=2) & ~np.all(sign, axis=2)
    for m, s in zip(*np.nonzero(cross)):
        vals, pts = gt[m, s], xt[m, s]
        ends = []
        for i, j in ((0, 1), (1, 2), (2, 0)):
            if (vals[i] > 0) != (vals[j] > 0):
                t = vals[i] / (vals[i] - vals[j])
                ends.append(pts[i] + t * (pts[j] - pts[i]))
        if len(ends) == 2:
            segs.append(ends)
    return np.array(segs).reshape(-1, 2, 2)


def write_polylines(boundaries, path) -> None:
    """CSV with columns ``component,bound,x,y,segment``."""
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["component", "bound", "x", "y", "segment"])
        sid = 0
        for k, name, segs in boundaries:
            for seg in segs:
                for pt in seg:
                    wr.writerow([k, name, repr(float(pt[0])), repr(float(pt[1])), sid])
                sid += 1
