"""Residual a posteriori error indicators.

All indicator values are stored squared, per cell.  Interior-edge flux
jumps are charged in full to each of the two adjacent cells.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .mesh import Mesh
from .quadrature import line_rule, make_rule
from .solvers import OptimalitySolution, ProblemData, project_control
from .spaces import FEField, cell_maps, l2_project_elementwise

__all__ = [
    "IndicatorField", "KINDS", "est_state", "est_adjoint", "est_control", "combine",
    "oscillation", "estimate", "write_indicators", "edge_jumps", "divergence_squared",
]

KINDS = ("state", "adjoint", "control", "combined", "semi-state", "semi-adjoint",
         "semi-combined", "oscillation")


@dataclass(frozen=True, eq=False)
class IndicatorField:
    """Squared per-cell indicator values."""

    kind: str
    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown indicator kind {self.kind!r}")
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_cells,):
            raise ValueError("one value per cell expected")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("indicator values must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def total_squared(self) -> float:
        return float(self.values.sum())

    @property
    def total(self) -> float:
        return float(np.sqrt(self.values.sum()))


def _eval_data(func, x):
    if func is None:
        return np.zeros(x.shape[:2] + (2,))
    v = np.asarray(func(x.reshape(-1, 2)), dtype=float)
    return v.reshape(x.shape[:2] + (2,))


def edge_jumps(mesh: Mesh, velocity: FEField, pressure: FEField, nu: float) -> np.ndarray:
    """Per-cell sum of ``h_T * ||[(nu grad v - q I) n]||^2`` over interior edges."""
    ec = mesh.edge_cells
    interior = np.flatnonzero(ec[:, 1] >= 0)
    out = np.zeros(mesh.n_cells)
    if len(interior) == 0:
        return out
    s, w = line_rule(19)
    e = mesh.edges[interior]
    a, b = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    x = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]     # (E, Q, 2)
    length = np.linalg.norm(b - a, axis=1)
    normal = np.column_stack([(b - a)[:, 1], -(b - a)[:, 0]]) / length[:, None]
    t0, t1 = ec[interior, 0], ec[interior, 1]
    flux = []
    for t in (t0, t1):
        maps = cell_maps(mesh, t)
        ref = np.einsum("eij,eqj->eqi", maps.Jinv, x - maps.x0[:, None, :])
        _, g = velocity.evaluate(ref, cells=t, maps=maps)               # (E, Q, 2, 2)
        q, _ = pressure.evaluate(ref, cells=t, maps=maps)               # (E, Q)
        flux.append(nu * np.einsum("eqij,ej->eqi", g, normal) - q[..., None] * normal[:, None, :])
    jump = flux[0] - flux[1]
    sq = length * np.einsum("q,eqi->e", w, jump**2)
    h = mesh.diameters
    np.add.at(out, t0, h[t0] * sq)
    np.add.at(out, t1, h[t1] * sq)
    return out


def divergence_squared(velocity: FEField) -> np.ndarray:
    """Per-cell ``||div v||^2`` by degree-19 quadrature."""
    rule, maps, _, wq = _setup(velocity.mesh)
    _, g = velocity.evaluate(rule.xy, maps=maps)
    return np.einsum("mq,mq->m", wq, np.einsum("mqii->mq", g) ** 2)


def _volume(mesh: Mesh, residual: np.ndarray, wq) -> np.ndarray:
    return np.einsum("mq,mqi->m", wq, residual**2)


def _setup(mesh):
    rule = make_rule(19)
    maps = cell_maps(mesh)
    x = maps.to_physical(rule.xy)
    wq = rule.weights[None, :] * maps.detJ[:, None]
    return rule, maps, x, wq


def _kind(solution, base):
    return base if solution.scheme == "fully" else "semi-" + base


def est_state(solution: OptimalitySolution, data: ProblemData | None = None) -> IndicatorField:
    """State indicator: momentum residual, divergence and flux jumps."""
    data = data or solution.data
    mesh = solution.mesh
    rule, maps, x, wq = _setup(mesh)
    yv, gy = solution.y.evaluate(rule.xy, maps=maps)
    _, gp = solution.p.evaluate(rule.xy, maps=maps)
    lap = solution.y.laplacian(maps=maps)
    u = solution.control_values(rule.xy, maps=maps)
    res = (_eval_data(data.f, x) + u + data.nu * lap[:, None, :]
           - np.einsum("mqij,mqj->mqi", gy, yv) - gp)
    h = mesh.diameters
    vals = (h**2 * _volume(mesh, res, wq) + divergence_squared(solution.y)
            + edge_jumps(mesh, solution.y, solution.p, data.nu))
    return IndicatorField(_kind(solution, "state"), vals, mesh)


def est_adjoint(solution: OptimalitySolution, data: ProblemData | None = None) -> IndicatorField:
    """Adjoint indicator: residual of the linearized adjoint, divergence and jumps."""
    data = data or solution.data
    mesh = solution.mesh
    rule, maps, x, wq = _setup(mesh)
    yv, gy = solution.y.evaluate(rule.xy, maps=maps)
    zv, gz = solution.z.evaluate(rule.xy, maps=maps)
    _, gr = solution.r.evaluate(rule.xy, maps=maps)
    lap = solution.z.laplacian(maps=maps)
    res = (yv - _eval_data(data.y_desired, x) + data.nu * lap[:, None, :]
           - np.einsum("mqji,mqj->mqi", gy, zv) + np.einsum("mqij,mqj->mqi", gz, yv) - gr)
    h = mesh.diameters
    vals = (h**2 * _volume(mesh, res, wq) + divergence_squared(solution.z)
            + edge_jumps(mesh, solution.z, solution.r, data.nu))
    return IndicatorField(_kind(solution, "adjoint"), vals, mesh)


def est_control(solution: OptimalitySolution, data: ProblemData | None = None,
                control: FEField | None = None) -> IndicatorField:
    """``||clamp(-z/alpha) - u||^2`` per cell; fully discrete scheme only.

    ``control`` overrides the solution's control (for diagnostics).
    """
    data = data or solution.data
    u = control if control is not None else solution.u
    if u is None:
        raise ValueError("control indicator is defined for the fully discrete scheme only")
    mesh = solution.mesh
    rule, maps, _, wq = _setup(mesh)
    zv, _ = solution.z.evaluate(rule.xy, maps=maps)
    ut = project_control(zv, data.alpha, data.lower, data.upper)
    uh, _ = u.evaluate(rule.xy, maps=maps) if isinstance(u, FEField) else (u, None)
    return IndicatorField("control", _volume(mesh, ut - uh, wq), mesh)


def combine(*parts: IndicatorField) -> IndicatorField:
    """Cellwise sum of squared indicators."""
    if not parts:
        raise ValueError("nothing to combine")
    mesh = parts[0].mesh
    if any(p.mesh is not mesh for p in parts):
        raise ValueError("indicators live on different meshes")
    semi = all(p.kind.startswith("semi-") for p in parts)
    vals = np.sum([p.values for p in parts], axis=0)
    return IndicatorField("semi-combined" if semi else "combined", vals, mesh)


def oscillation(g: Callable, mesh: Mesh, cells=None) -> IndicatorField:
    """``h_T^2 ||g - Pi_T g||^2`` with ``Pi_T`` the local L2 projection onto P2.

    Cells outside ``cells`` get zero.
    """
    idx = np.arange(mesh.n_cells) if cells is None else np.asarray(sorted(cells), dtype=int)
    vals = np.zeros(mesh.n_cells)
    if len(idx):
        _, err2 = l2_project_elementwise(g, mesh, idx)
        vals[idx] = mesh.diameters[idx] ** 2 * err2
    return IndicatorField("oscillation", vals, mesh)


def estimate(solution: OptimalitySolution) -> dict:
    """All indicators of a solution keyed by ``state``, ``adjoint``, ``control``, ``combined``.

    ``control`` is None for the semi-discrete scheme.
    """
    st = est_state(solution)
    ad = est_adjoint(solution)
    ct = est_control(solution) if solution.scheme == "fully" else None
    parts = [st, ad] + ([ct] if ct is not None else [])
    return {"state": st, "adjoint": ad, "control": ct, "combined": combine(*parts)}


def write_indicators(indicators: dict, path) -> None:
    """CSV with columns ``cell,state,adjoint,control,combined`` (squared values)."""
    st = indicators["state"].values
    ad = indicators["adjoint"].values
    ct = indicators["control"].values if indicators.get("control") is not None else np.zeros_like(st)
    cb = indicators["combined"].values
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["cell", "state", "adjoint", "control", "combined"])
        for i in range(len(st)):
            wr.writerow([i, repr(float(st[i])), repr(float(ad[i])), repr(float(ct[i])),
                         repr(float(cb[i]))])
