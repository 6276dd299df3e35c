"""Quadrature rules, Taylor-Hood bases, DOF maps and field operations."""
from __future__ import annotations

from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsocp.mesh import Mesh, interior_edges, l_shape, refine, refine_uniform, unit_square
from nsocp.quadrature import line_rule, make_rule
from nsocp.spaces import (
    P1, P2, P2_CONTROL, P2_VECTOR, DofMap, FEField, cell_maps, eval_basis, interpolate,
    l2_project_elementwise, norms, prolong,
)


def monomial_integral(a, b):
    """Exact integral of x^a y^b over the reference triangle."""
    return factorial(a) * factorial(b) / factorial(a + b + 2)


def quad_integral(rule, f):
    return float(rule.weights @ f(rule.xy[:, 0], rule.xy[:, 1]))


# ------------------------------------------------------------------ quadrature

def test_rule_examples():
    assert quad_integral(make_rule(1), lambda x, y: np.ones_like(x)) == pytest.approx(0.5, abs=1e-15)
    r19 = quad_integral(make_rule(19), lambda x, y: x**10 * y**9)
    assert r19 == pytest.approx(factorial(10) * factorial(9) / factorial(21), rel=1e-12)
    r5 = quad_integral(make_rule(5), lambda x, y: x**3 * y**2)
    assert r5 == pytest.approx(1 / 420, rel=1e-12)


@pytest.mark.parametrize("degree", range(1, 20))
def test_rule_exactness_all_monomials(degree):
    rule = make_rule(degree)
    assert rule.degree >= degree
    assert abs(rule.weights.sum() - 0.5) <= 1e-14
    assert np.all(rule.weights > 0)
    assert np.all(rule.points >= -1e-15)
    assert np.allclose(rule.points.sum(axis=1), 1.0, atol=1e-15)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            got = quad_integral(rule, lambda x, y: x**a * y**b)
            exact = monomial_integral(a, b)
            assert abs(got - exact) <= 1e-12 * exact, (a, b)


def test_degree_19_rule_has_100_points():
    assert len(make_rule(19)) == 100


@pytest.mark.parametrize("degree", [0, 20, -1])
def test_rule_rejects_unsupported_degree(degree):
    with pytest.raises(ValueError):
        make_rule(degree)


def test_line_rule():
    s, w = line_rule(19)
    for k in range(20):
        assert abs(w @ s**k - 1 / (k + 1)) <= 1e-14


# ------------------------------------------------------------------ basis functions

def test_p1_at_barycenter():
    vals, grads, hess = eval_basis(P1, [[1 / 3, 1 / 3]])
    assert np.allclose(vals, 1 / 3, atol=1e-15)
    assert np.allclose(grads.sum(axis=1), 0.0)
    assert np.all(hess == 0)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(0, 1), t=st.floats(0, 1))
def test_p2_partition_of_unity(x, t):
    pt = np.array([[x, t * (1 - x)]])
    vals, grads, _ = eval_basis(P2, pt)
    assert abs(vals.sum() - 1) <= 1e-14
    assert np.allclose(grads.sum(axis=1), 0.0, atol=1e-13)


def test_p2_nodal_basis():
    nodes = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0.5], [0, 0.5], [0.5, 0]], dtype=float)
    vals, _, _ = eval_basis(P2_VECTOR, nodes)
    assert np.allclose(vals, np.eye(6), atol=1e-15)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        eval_basis("P3", [[0.1, 0.1]])


def test_p2_laplacians_match_finite_differences():
    mesh = Mesh([[0.1, -0.2], [1.3, 0.1], [0.4, 0.9]], [[0, 1, 2]])
    maps = cell_maps(mesh)
    _, _, hess = eval_basis(P2, np.zeros((1, 2)))
    lap = maps.laplacians(hess)[0]

    def basis_at(x):
        ref = np.linalg.solve(maps.J[0], np.asarray(x) - maps.x0[0])
        return eval_basis(P2, ref[None, :])[0][0]

    h = 1e-5
    c = np.array([0.55, 0.3])
    fd = np.zeros(6)
    for e in (np.array([h, 0]), np.array([0, h])):
        fd += (basis_at(c + e) - 2 * basis_at(c) + basis_at(c - e)) / h**2
    assert np.allclose(lap, fd, atol=1e-6 * max(1, np.abs(lap).max()))


# ------------------------------------------------------------------ DOF maps

@pytest.mark.parametrize("mesh", [unit_square(), l_shape(), refine_uniform(l_shape(), 3),
                                  refine(refine_uniform(unit_square(), 2), {0, 5})])
def test_dof_counts(mesh):
    euler_edges = mesh.n_vertices + mesh.n_cells - 1
    assert mesh.n_edges == euler_edges
    assert DofMap(mesh, P1).n_dofs == mesh.n_vertices
    assert DofMap(mesh, P2).n_dofs == mesh.n_vertices + euler_edges
    assert DofMap(mesh, P2_VECTOR).n_dofs == 2 * (mesh.n_vertices + euler_edges)
    assert DofMap(mesh, P2_CONTROL).n_dofs == 2 * (mesh.n_vertices + euler_edges)


def test_boundary_dofs_lie_on_boundary():
    mesh = refine_uniform(l_shape(), 2)
    dm = DofMap(mesh, P2)
    x = dm.coordinates[dm.boundary_scalar_dofs]
    on_box = np.isclose(np.abs(x).max(axis=1), 1.0)
    on_notch = (np.isclose(x[:, 0], 0) & (x[:, 1] <= 0)) | (np.isclose(x[:, 1], 0) & (x[:, 0] >= 0))
    assert np.all(on_box | on_notch)
    # every midpoint of a boundary edge and every boundary vertex is listed
    assert len(dm.boundary_scalar_dofs) == 2 * int(mesh.boundary_edges.sum())


def test_dofs_shared_across_cells():
    mesh = refine_uniform(l_shape(), 2)
    dm = DofMap(mesh, P2)
    counts = np.bincount(dm.cell_dofs.ravel(), minlength=dm.n_dofs)
    assert np.all(counts >= 1)
    # interior edge midpoints are shared by exactly two cells
    mid = counts[mesh.n_vertices:]
    assert set(mid.tolist()) <= {1, 2}


def test_field_length_checked():
    dm = DofMap(unit_square(), P1)
    with pytest.raises(ValueError):
        FEField(dm, np.zeros(dm.n_dofs + 1))


# ------------------------------------------------------------------ interpolation and continuity

def quadratic(coef):
    def f(x):
        X, Y = x[:, 0], x[:, 1]
        return coef[0] + coef[1] * X + coef[2] * Y + coef[3] * X**2 + coef[4] * X * Y + coef[5] * Y**2
    return f


coef6 = st.lists(st.floats(-3, 3), min_size=6, max_size=6)


@settings(max_examples=20, deadline=None)
@given(c1=coef6, c2=coef6)
def test_interpolation_reproduces_quadratics(c1, c2):
    mesh = refine(refine_uniform(l_shape(), 1), {0, 3})
    f, g = quadratic(c1), quadratic(c2)
    field = interpolate(DofMap(mesh, P2_VECTOR), lambda x: np.column_stack([f(x), g(x)]))
    rule = make_rule(7)
    x = cell_maps(mesh).to_physical(rule.xy).reshape(-1, 2)
    v, _ = field.evaluate(rule.xy)
    assert np.abs(v.reshape(-1, 2) - np.column_stack([f(x), g(x)])).max() <= 1e-12 * (1 + 3 * 6)


def test_field_continuous_across_interior_edges():
    mesh = refine(refine_uniform(l_shape(), 2), {1, 8, 9})
    rng = np.random.default_rng(3)
    for kind in (P1, P2_VECTOR):
        dm = DofMap(mesh, kind)
        field = FEField(dm, rng.standard_normal(dm.n_dofs))
        s, _ = line_rule(7)
        for e, t0, t1, _ in interior_edges(mesh)[:40]:
            a, b = mesh.vertices[mesh.edges[e]]
            x = a + s[:, None] * (b - a)
            vals = []
            for t in (t0, t1):
                maps = cell_maps(mesh, [t])
                ref = (maps.Jinv[0] @ (x - maps.x0[0]).T).T
                vals.append(field.evaluate(ref[None], cells=[t], maps=maps)[0][0])
            assert np.abs(vals[0] - vals[1]).max() <= 1e-12 * (1 + np.abs(vals[0]).max())


def test_prolongation_is_exact_on_nested_meshes():
    coarse = refine_uniform(l_shape(), 1)
    fine = refine(coarse, {0, 2, 7})
    rng = np.random.default_rng(4)
    for kind in (P1, P2_VECTOR):
        cf = FEField(DofMap(coarse, kind), rng.standard_normal(DofMap(coarse, kind).n_dofs))
        ff = prolong(cf, DofMap(fine, kind))
        pts = np.array([[0.3, 0.2], [-0.5, 0.7], [-0.2, -0.6], [0.05, 0.9]])
        assert np.allclose(cf(pts), ff(pts), atol=1e-13)


def test_prolong_requires_ancestry():
    m = unit_square()
    f = FEField(DofMap(m, P1), np.ones(4))
    with pytest.raises(ValueError):
        prolong(f, DofMap(Mesh(m.vertices, m.cells), P1))


# ------------------------------------------------------------------ elementwise projection

def test_projection_reproduces_quadratics():
    mesh = refine_uniform(l_shape(), 1)
    g = quadratic([1, -2, 0.5, 3, -1, 2])
    coef, err2 = l2_project_elementwise(g, mesh)
    assert np.all(err2 <= 1e-24)
    _, err2v = l2_project_elementwise(lambda x: np.column_stack([g(x), 2 * g(x)]), mesh)
    assert np.all(err2v <= 1e-24)


def test_projection_cubic_matches_least_squares():
    mesh = Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    rule = make_rule(19)
    x = rule.xy
    g = x[:, 0] ** 3
    phi, _, _ = eval_basis(P2, x)
    sw = np.sqrt(rule.weights)
    c, *_ = np.linalg.lstsq(sw[:, None] * phi, sw * g, rcond=None)
    oracle = np.sqrt(np.sum(rule.weights * (g - phi @ c) ** 2))
    coef, err2 = l2_project_elementwise(lambda p: p[:, 0] ** 3, mesh)
    assert abs(np.sqrt(err2[0]) - oracle) <= 1e-10
    assert np.allclose(coef[0], c, atol=1e-10)


def test_projection_of_zero():
    coef, err2 = l2_project_elementwise(lambda x: np.zeros(len(x)), unit_square())
    assert np.all(coef == 0) and np.all(err2 == 0)


# ------------------------------------------------------------------ norms

def test_norm_examples():
    sq = refine_uniform(unit_square(), 2)
    f = interpolate(DofMap(sq, P2), lambda x: x[:, 0])
    l2, h1 = norms(f)
    assert l2 == pytest.approx(1 / np.sqrt(3), rel=1e-13)
    assert h1 == pytest.approx(1.0, rel=1e-13)
    assert norms(f, other=f) == (0.0, 0.0)
    L = l_shape()
    c = FEField(DofMap(L, P1), np.full(L.n_vertices, -2.5))
    assert norms(c)[0] == pytest.approx(2.5 * np.sqrt(3), rel=1e-13)
    # against an analytic reference
    assert norms(f, exact=lambda x: x[:, 0], exact_grad=lambda x: np.tile([1.0, 0.0], (len(x), 1)))[0] <= 1e-14


def test_norms_reject_mismatched_meshes():
    a = FEField(DofMap(unit_square(), P1), np.zeros(4))
    b = FEField(DofMap(refine_uniform(unit_square(), 1), P1), np.zeros(5))
    with pytest.raises(ValueError):
        norms(a, other=b)
