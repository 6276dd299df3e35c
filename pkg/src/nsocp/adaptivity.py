"""Maximum marking and the solve-estimate-mark-refine loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .estimators import IndicatorField, estimate
from .manufactured import ExactSolution, exact_errors
from .mesh import Mesh, refine, refine_uniform
from .reporting import ConvergenceRecord
from .solvers import (
    Discretization, OptimalitySolution, ProblemData, SolverError, active_set_solve,
    newton_semidiscrete, QUADRATURE_VARIANTS,
)
from .spaces import prolong

__all__ = ["LoopConfig", "LoopResult", "mark", "run_loop", "prolong_solution"]

log = logging.getLogger(__name__)


def mark(indicators, fraction: float = 0.5) -> set:
    """Cells whose squared indicator strictly exceeds ``fraction`` times the maximum."""
    if not 0 < fraction <= 1:
        raise ValueError("marking fraction must lie in (0, 1]")
    v = indicators.values if isinstance(indicators, IndicatorField) else np.asarray(indicators, float)
    if np.any(v < 0):
        raise ValueError("indicators must be nonnegative")
    if v.size == 0 or v.max() <= 0:
        return set()
    top = v.max()
    chosen = set(np.flatnonzero(v > fraction * top).tolist())
    if not chosen:
        # fraction = 1 leaves nothing strictly above the maximum
        chosen = set(np.flatnonzero(v == top).tolist())
    return chosen


@dataclass
class LoopConfig:
    """Settings of one convergence study.

    ``refine`` is ``"adaptive"`` or ``"uniform"``; a uniform step bisects
    every cell ``uniform_passes`` times.  ``initial_refinements`` uniform
    passes are applied to ``mesh0`` before the first solve.
    """

    data: ProblemData
    mesh0: Mesh
    scheme: str = "fully"
    quadrature: str = "s19"
    marking_fraction: float = 0.5
    max_iters: int = 10
    max_ndof: int | None = None
    refine: str = "adaptive"
    initial_refinements: int = 2
    uniform_passes: int = 2
    exact: ExactSolution | None = None

    def __post_init__(self):
        if self.scheme not in ("fully", "semi"):
            raise ValueError("scheme must be 'fully' or 'semi'")
        if self.quadrature not in QUADRATURE_VARIANTS:
            raise ValueError(f"quadrature must be one of {QUADRATURE_VARIANTS}")
        if self.refine not in ("adaptive", "uniform"):
            raise ValueError("refine must be 'adaptive' or 'uniform'")
        if not 0 < self.marking_fraction <= 1:
            raise ValueError("marking fraction must lie in (0, 1]")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.max_ndof is not None and self.max_ndof < 1:
            raise ValueError("max_ndof must be positive")

    def snapshot(self) -> dict:
        d = self.data
        return {
            "scheme": self.scheme, "quadrature": self.quadrature, "refine": self.refine,
            "marking_fraction": self.marking_fraction, "max_iters": self.max_iters,
            "max_ndof": self.max_ndof, "initial_refinements": self.initial_refinements,
            "uniform_passes": self.uniform_passes, "nu": d.nu, "alpha": d.alpha,
            "lower": list(d.lower), "upper": list(d.upper),
            "problem": (self.exact.params.get("name") if self.exact else None),
            "initial_cells": int(self.mesh0.n_cells),
        }


@dataclass
class LoopResult:
    records: list = field(default_factory=list)
    solution: OptimalitySolution | None = None
    indicators: dict | None = None
    mesh: Mesh | None = None
    failure: str | None = None


def prolong_solution(sol: OptimalitySolution, fine: Mesh) -> OptimalitySolution:
    disc = Discretization(fine, sol.data)
    u = prolong(sol.u, disc.U) if sol.u is not None else None
    return OptimalitySolution(prolong(sol.y, disc.V), prolong(sol.p, disc.P),
                              prolong(sol.z, disc.V), prolong(sol.r, disc.P), u,
                              sol.scheme, sol.data, sol.quadrature)


def run_loop(config: LoopConfig, on_iteration: Callable | None = None) -> LoopResult:
    """Run the adaptive (or uniform) loop and collect one record per iteration.

    ``on_iteration(record, mesh, solution, indicators)`` is called after each
    iteration.  A solver failure ends the loop; completed records are kept
    and the diagnostic is stored in ``failure``.
    """
    mesh = refine_uniform(config.mesh0, config.initial_refinements)
    result = LoopResult()
    guess = None
    it = 0
    while True:
        it += 1
        t0 = time.perf_counter()
        disc = Discretization(mesh, config.data)
        try:
            if config.scheme == "fully":
                sol = active_set_solve(config.data, mesh, guess, disc=disc)
            else:
                sol = newton_semidiscrete(config.data, mesh, guess, config.quadrature, disc=disc)
        except SolverError as exc:
            result.failure = f"iteration {it}: {exc}"
            log.error("loop aborted: %s", result.failure)
            return result
        ind = estimate(sol)
        seconds = time.perf_counter() - t0
        rec = ConvergenceRecord(
            iter=it, ndof=disc.ndof(config.scheme),
            est_st=ind["state"].total, est_ad=ind["adjoint"].total,
            est_ct=ind["control"].total if ind["control"] is not None else 0.0,
            est_ocp=ind["combined"].total, seconds=seconds)
        if config.exact is not None:
            err = exact_errors(sol, config.exact)
            rec.err_y_h1, rec.err_p_l2 = err.y_h1, err.p_l2
            rec.err_z_h1, rec.err_r_l2, rec.err_u_l2 = err.z_h1, err.r_l2, err.u_l2
            rec.err_total = err.total
            rec.effectivity = err.effectivity(rec.est_ocp)
        result.records.append(rec)
        result.solution, result.indicators, result.mesh = sol, ind, mesh
        log.info("loop iter=%d ndof=%d est=%.4e err=%.4e eff=%.3f time=%.2fs", it, rec.ndof,
                 rec.est_ocp, rec.err_total, rec.effectivity, seconds)
        if on_iteration is not None:
            on_iteration(rec, mesh, sol, ind)
        if config.max_iters is not None and it >= config.max_iters:
            break
        if config.max_ndof is not None and rec.ndof >= config.max_ndof:
            break
        if config.refine == "uniform":
            new = refine_uniform(mesh, config.uniform_passes)
        else:
            marked = mark(ind["combined"], config.marking_fraction)
            if not marked:
                break
            new = refine(mesh, marked)
        guess = prolong_solution(sol, new)
        mesh = new
    return result
