"""Operator assembly, Dirichlet handling and elimination."""
from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from nsocp.assembly import (
    apply_dirichlet, assemble_convection, assemble_convection_adjoint_jacobian,
    assemble_divergence, assemble_load, assemble_mass, assemble_viscous, build_saddle,
    eliminate, pressure_mean,
)
from nsocp.mesh import refine, refine_uniform, unit_square
from nsocp.quadrature import make_rule
from nsocp.spaces import P1, P2_VECTOR, DofMap, FEField, interpolate


@pytest.fixture(scope="module")
def square():
    m = refine(refine_uniform(unit_square(), 3), {0, 7, 12})
    return m, DofMap(m, P2_VECTOR), DofMap(m, P1)


def random_field(dm, seed):
    return FEField(dm, np.random.default_rng(seed).standard_normal(dm.n_dofs))


def vector_quadratic(seed):
    """Random quadratic vector field with its analytic gradient."""
    c = np.random.default_rng(seed).standard_normal((2, 6))

    def val(x):
        X, Y = x[:, 0], x[:, 1]
        basis = np.stack([np.ones_like(X), X, Y, X**2, X * Y, Y**2], axis=1)
        return basis @ c.T

    def grad(x):
        X, Y = x[:, 0], x[:, 1]
        one, zero = np.ones_like(X), np.zeros_like(X)
        dx = np.stack([zero, one, zero, 2 * X, Y, zero], axis=1) @ c.T
        dy = np.stack([zero, zero, one, zero, X, 2 * Y], axis=1) @ c.T
        return np.stack([dx, dy], axis=2)            # [n, i, j] = d_j v_i
    return val, grad


def oracle_integral(mesh, integrand):
    """Sum of degree-19 quadrature over cells using barycentric mapping."""
    rule = make_rule(19)
    total = 0.0
    for t in mesh.cells:
        p = mesh.vertices[t]
        x = rule.points @ p
        d1, d2 = p[1] - p[0], p[2] - p[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        total += 2 * area * np.dot(rule.weights, integrand(x))
    return total


# ------------------------------------------------------------------ viscous and mass

def test_viscous_symmetric_and_constant_kernel(square):
    mesh, V, _ = square
    A = assemble_viscous(mesh, V, 1.7)
    assert abs(A - A.T).max() <= 1e-13
    assert np.abs(A @ np.ones(V.n_dofs)).max() <= 1e-12
    with pytest.raises(ValueError):
        assemble_viscous(mesh, V, 0.0)


def test_viscous_energy(square):
    mesh, V, _ = square
    v = interpolate(V, lambda x: np.column_stack([x[:, 0], 0 * x[:, 0]]))
    A = assemble_viscous(mesh, V, 1.0)
    assert v.coefficients @ A @ v.coefficients == pytest.approx(1.0, rel=1e-13)


def test_mass_integrates_one(square):
    mesh, V, P = square
    assert np.ones(V.n_dofs) @ assemble_mass(mesh, V) @ np.ones(V.n_dofs) == pytest.approx(2.0, rel=1e-13)
    assert np.ones(P.n_dofs) @ assemble_mass(mesh, P) @ np.ones(P.n_dofs) == pytest.approx(1.0, rel=1e-13)
    half = assemble_mass(mesh, P, cells=np.arange(mesh.n_cells // 2))
    assert np.ones(P.n_dofs) @ half @ np.ones(P.n_dofs) == pytest.approx(mesh.areas[: mesh.n_cells // 2].sum())


# ------------------------------------------------------------------ divergence

def test_divergence_examples(square):
    mesh, V, P = square
    B = assemble_divergence(mesh, V, P)
    assert B.shape == (P.n_dofs, V.n_dofs)
    free = interpolate(V, lambda x: np.column_stack([x[:, 0] ** 2, -2 * x[:, 0] * x[:, 1]]))
    assert np.abs(B @ free.coefficients).max() <= 1e-12
    const = interpolate(V, lambda x: np.tile([3.0, -1.0], (len(x), 1)))
    assert np.abs(B @ const.coefficients).max() <= 1e-12
    lin = interpolate(V, lambda x: np.column_stack([x[:, 0], 0 * x[:, 0]]))
    assert np.allclose(B @ lin.coefficients, pressure_mean(mesh, P), atol=1e-14)


def test_pressure_mean_integrates(square):
    mesh, _, P = square
    p = interpolate(P, lambda x: 2 * x[:, 0] - x[:, 1] + 0.25)
    assert pressure_mean(mesh, P) @ p.coefficients == pytest.approx(1.0 - 0.5 + 0.25, rel=1e-13)


# ------------------------------------------------------------------ convection

def bubble_curl(x):
    """Velocity curl((x(1-x) y(1-y))^2): divergence free, zero on the square's boundary."""
    X, Y = x[:, 0], x[:, 1]
    a, b = X * (1 - X), Y * (1 - Y)
    da, db = 1 - 2 * X, 1 - 2 * Y
    w = np.column_stack([2 * a**2 * b * db, -2 * a * da * b**2])
    g = np.empty((len(X), 2, 2))
    g[:, 0, 0] = 4 * a * da * b * db
    g[:, 0, 1] = 2 * a**2 * (db**2 - 2 * b)
    g[:, 1, 0] = -2 * (da**2 - 2 * a) * b**2
    g[:, 1, 1] = -4 * a * da * b * db
    return w, g


def test_bubble_curl_is_divergence_free():
    x = np.random.default_rng(0).uniform(0, 1, (50, 2))
    _, g = bubble_curl(x)
    assert np.abs(g[:, 0, 0] + g[:, 1, 1]).max() <= 1e-15
    h = 1e-6
    w_px, _ = bubble_curl(x + [h, 0])
    w_mx, _ = bubble_curl(x - [h, 0])
    assert np.allclose((w_px - w_mx) / (2 * h), g[:, :, 0], atol=1e-8)


def test_convection_zero_for_zero_wind(square):
    mesh, V, _ = square
    N1, N2 = assemble_convection(mesh, V, FEField(V))
    assert N1.nnz == 0 or abs(N1).max() == 0
    assert N2.nnz == 0 or abs(N2).max() == 0


def test_convection_skew_for_solenoidal_wind(square):
    mesh, V, _ = square
    N1, _ = assemble_convection(mesh, V, bubble_curl, rule=make_rule(19))
    for seed in range(10):
        v = random_field(V, seed).coefficients
        assert abs(v @ N1 @ v) <= 1e-10


def test_trilinear_matches_polynomial_oracle(square):
    mesh, V, _ = square
    (f1, g1), (f2, g2), (f3, _) = (vector_quadratic(s) for s in (1, 2, 3))
    w1, w2, w3 = (interpolate(V, f) for f in (f1, f2, f3))
    N1, N2 = assemble_convection(mesh, V, w1)
    b123 = oracle_integral(mesh, lambda x: np.einsum("nij,nj,ni->n", g2(x), f1(x), f3(x)))
    b213 = oracle_integral(mesh, lambda x: np.einsum("nij,nj,ni->n", g1(x), f2(x), f3(x)))
    assert w3.coefficients @ N1 @ w2.coefficients == pytest.approx(b123, rel=1e-12, abs=1e-12)
    assert w3.coefficients @ N2 @ w2.coefficients == pytest.approx(b213, rel=1e-12, abs=1e-12)
    K = assemble_convection_adjoint_jacobian(mesh, V, w3)
    # v^T K u = b(u; v, z)
    assert w2.coefficients @ K @ w1.coefficients == pytest.approx(b123, rel=1e-12, abs=1e-12)


def test_trilinear_on_random_fields_matches_cell_loop(square):
    mesh, V, _ = square
    w, u, v = (random_field(V, s) for s in (5, 6, 7))
    N1, _ = assemble_convection(mesh, V, w)
    rule = make_rule(19)
    wv, _ = w.evaluate(rule.xy)
    _, ug = u.evaluate(rule.xy)
    vv, _ = v.evaluate(rule.xy)
    det = 2 * mesh.areas
    direct = sum(det[m] * rule.weights @ np.einsum("qij,qj,qi->q", ug[m], wv[m], vv[m])
                 for m in range(mesh.n_cells))
    assert v.coefficients @ N1 @ u.coefficients == pytest.approx(direct, rel=1e-12, abs=1e-12)


# ------------------------------------------------------------------ loads, Dirichlet data, elimination

def test_load_of_constant(square):
    mesh, V, _ = square
    F = assemble_load(mesh, V, lambda x: np.tile([1.0, 2.0], (len(x), 1)))
    ones = np.ones(V.n_scalar)
    assert F[:V.n_scalar] @ ones == pytest.approx(1.0, rel=1e-13)
    assert F[V.n_scalar:] @ ones == pytest.approx(2.0, rel=1e-13)


def test_apply_dirichlet(square):
    mesh, V, P = square
    F = np.random.default_rng(1).standard_normal(V.n_dofs)
    sys0 = apply_dirichlet(build_saddle(mesh, V, P, assemble_viscous(mesh, V), F), None)
    assert np.all(sys0.values == 0)
    K = sys0.matrix()
    _, rhs, free = eliminate(K, sys0.rhs(), sys0.fixed, sys0.values)
    assert np.array_equal(rhs, sys0.rhs()[free])

    g = lambda x: np.column_stack([x[:, 0] ** 2, -2 * x[:, 0] * x[:, 1]])
    sys1 = apply_dirichlet(sys0, g)
    bs = V.boundary_scalar_dofs
    xb = V.coordinates[bs]
    assert np.array_equal(sys1.values, np.concatenate([g(xb)[:, 0], g(xb)[:, 1]]))
    assert np.array_equal(sys1.fixed, np.concatenate([bs, bs + V.n_scalar]))


def test_elimination_preserves_solution():
    rng = np.random.default_rng(2)
    R = rng.standard_normal((12, 12))
    K = sp.csr_matrix(R @ R.T + 12 * np.eye(12))
    F = rng.standard_normal(12)
    x = np.linalg.solve(K.toarray(), F)
    fixed = np.array([0, 4, 9])
    Kff, rhs, free = eliminate(K, F, fixed, x[fixed])
    xf = np.linalg.solve(Kff.toarray(), rhs)
    assert np.allclose(xf, x[free], rtol=1e-12, atol=1e-12)
