"""Shared fixtures and the acceptance summary printed at the end of a run."""
from __future__ import annotations

import numpy as np
import pytest

from nsocp.manufactured import example1, poly2d
from nsocp.mesh import Mesh, refine, refine_uniform, unit_square
from nsocp.solvers import OptimalitySolution, active_set_solve, newton_semidiscrete
from nsocp.spaces import P1, P2_CONTROL, P2_VECTOR, DofMap, FEField, interpolate

# criterion number -> (passed, message); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {msg}")


def graded_square(rounds: int = 3, seed: int = 0) -> Mesh:
    """Unit square refined uniformly once and then at random cells."""
    rng = np.random.default_rng(seed)
    mesh = refine_uniform(unit_square(), 2)
    for _ in range(rounds):
        k = max(1, mesh.n_cells // 5)
        mesh = refine(mesh, rng.choice(mesh.n_cells, size=k, replace=False))
    return mesh


def solution_from(mesh, data, y=None, p=None, z=None, r=None, u=None, scheme="fully"):
    """Solution built from fields or interpolated callables; missing fields are zero."""
    V, P, U = DofMap(mesh, P2_VECTOR), DofMap(mesh, P1), DofMap(mesh, P2_CONTROL)

    def make(dm, f):
        if f is None:
            return FEField(dm)
        return f if isinstance(f, FEField) else interpolate(dm, f)
    uf = make(U, u) if scheme == "fully" else None
    return OptimalitySolution(make(V, y), make(P, p), make(V, z), make(P, r), uf, scheme, data)


@pytest.fixture(scope="session")
def poly():
    return poly2d()


@pytest.fixture(scope="session")
def poly_mesh():
    return graded_square()


@pytest.fixture(scope="session")
def poly_fully(poly, poly_mesh):
    return active_set_solve(poly[1], poly_mesh)


@pytest.fixture(scope="session")
def poly_semi(poly, poly_mesh):
    return newton_semidiscrete(poly[1], poly_mesh)


@pytest.fixture(scope="session")
def ex1():
    return example1()


@pytest.fixture(scope="session")
def ex1_coarse(ex1):
    return refine_uniform(ex1[0].mesh0(), 2)
