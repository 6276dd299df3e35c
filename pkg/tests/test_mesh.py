"""Mesh construction, longest-edge refinement and topology queries."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsocp.mesh import (
    Mesh, build_initial, interior_edges, l_shape, patch, read_mesh, refine,
    refine_uniform, unit_square, write_mesh,
)

L_POLYGON = np.array([[0, 0], [1, 0], [1, 1], [-1, 1], [-1, -1], [0, -1]], dtype=float)


def shoelace(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def edge_counts(mesh):
    counts = {}
    for t in mesh.cells:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return counts


def euler_interior_edges(mesh):
    """Interior edge count from V - E + F = 1 and 3F = 2 E_int + E_bnd."""
    n_bnd = sum(1 for c in edge_counts(mesh).values() if c == 1)
    E = mesh.n_vertices + mesh.n_cells - 1
    return E - n_bnd


# ------------------------------------------------------------------ construction

def test_unit_square_topology():
    m = unit_square()
    assert (m.n_vertices, m.n_cells, m.n_edges) == (4, 2, 5)
    assert len(interior_edges(m)) == 1


def test_l_shape_area_matches_shoelace():
    m = l_shape()
    assert m.n_cells == 6
    assert abs(m.areas.sum() - shoelace(L_POLYGON)) <= 1e-12
    assert abs(m.areas.sum() - 3.0) <= 1e-12
    # the reentrant corner is a vertex
    assert np.any(np.all(m.vertices == 0.0, axis=1))


def test_single_triangle():
    m = build_initial("triangle")
    assert m.n_cells == 1
    assert interior_edges(m) == []


def test_build_initial_from_polygon():
    m = build_initial(L_POLYGON)
    assert abs(m.areas.sum() - 3.0) <= 1e-12
    assert np.all(m.areas > 0)
    assert m.is_conforming()


@pytest.mark.parametrize("poly", [
    [[0, 0], [1, 0], [2, 0]],
    [[0, 0], [0, 1], [1, 0]],          # clockwise
])
def test_build_initial_rejects_bad_polygons(poly):
    with pytest.raises(ValueError):
        build_initial(poly)


def test_element_geometry():
    m = l_shape()
    g = m.geometry(0)
    assert g.h_T == pytest.approx(max(g.edge_lengths), abs=0)
    assert np.allclose(np.linalg.norm(g.unit_normals, axis=1), 1.0, atol=1e-14)
    # local edge k is opposite vertex k; its normal points away from the centroid
    cell = m.vertices[m.cells[0]]
    centroid = cell.mean(axis=0)
    for k in range(3):
        mid = 0.5 * (cell[(k + 1) % 3] + cell[(k + 2) % 3])
        assert np.dot(g.unit_normals[k], mid - centroid) > 0


# ------------------------------------------------------------------ refinement

def test_refine_single_triangle_bisects_hypotenuse():
    m = refine(build_initial("triangle"), {0})
    assert m.n_cells == 2
    new = m.vertices[3]
    assert np.array_equal(new, [0.5, 0.5])
    assert all(3 in c for c in m.cells)


def test_refine_square_closure():
    m = refine(unit_square(), {0})
    assert m.n_cells == 4
    assert m.is_conforming()
    assert all(c in (1, 2) for c in edge_counts(m).values())


def test_refine_empty_mark_is_identity():
    m0 = l_shape()
    m = refine(m0, set())
    assert np.array_equal(m.vertices, m0.vertices)
    assert np.array_equal(m.cells, m0.cells)


def test_refine_rejects_bad_ids():
    with pytest.raises(ValueError):
        refine(unit_square(), {5})


def test_refine_is_deterministic():
    a = refine(refine_uniform(l_shape(), 1), {0, 3, 7})
    b = refine(refine_uniform(l_shape(), 1), {7, 3, 0})
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.cells, b.cells)


# ------------------------------------------------------------------ interior edges and patches

def test_interior_edge_counts_match_euler():
    four = refine_uniform(unit_square(), 1)
    assert four.n_cells == 4
    assert len(interior_edges(four)) == euler_interior_edges(four) == 4
    for m in (unit_square(), l_shape(), refine_uniform(l_shape(), 3)):
        assert len(interior_edges(m)) == euler_interior_edges(m)


def test_interior_edge_orientation():
    m = refine_uniform(l_shape(), 2)
    for e, t0, t1, n in interior_edges(m):
        assert t0 < t1
        assert abs(np.linalg.norm(n) - 1) <= 1e-14
        # the normal points from t0 towards t1
        c0 = m.vertices[m.cells[t0]].mean(axis=0)
        c1 = m.vertices[m.cells[t1]].mean(axis=0)
        assert np.dot(n, c1 - c0) > 0


def test_patch_examples():
    assert patch(build_initial("triangle"), 0) == {0}
    assert patch(unit_square(), 0) == {0, 1}
    m = refine_uniform(unit_square(), 4)
    interior = [t for t in range(m.n_cells) if np.all(m.edge_cells[m.cell_edges[t]] >= 0)]
    assert interior
    for t in interior:
        assert len(patch(m, t)) == 4


def test_mesh_roundtrip(tmp_path):
    m = refine(refine_uniform(l_shape(), 1), {2, 5})
    write_mesh(m, tmp_path / "m.txt")
    back = read_mesh(tmp_path / "m.txt")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.cells, m.cells)


def test_read_mesh_rejects_bad_header(tmp_path):
    (tmp_path / "bad.txt").write_text("nodes 3\n")
    with pytest.raises(ValueError):
        read_mesh(tmp_path / "bad.txt")


# ------------------------------------------------------------------ properties

def _random_rounds(mesh, rounds, rng, fraction=0.1):
    history = [mesh]
    for _ in range(rounds):
        k = max(1, int(fraction * mesh.n_cells))
        mesh = refine(mesh, rng.choice(mesh.n_cells, size=min(k, 3), replace=False))
        history.append(mesh)
    return history


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_conformity_over_random_rounds(seed):
    rng = np.random.default_rng(seed)
    for m in _random_rounds(l_shape(), 50, rng):
        assert all(c in (1, 2) for c in edge_counts(m).values())
        assert np.all(m.areas > 0)
        assert abs(m.areas.sum() - 3.0) <= 1e-12
    assert m.is_conforming()


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), start=st.sampled_from(["l_shape", "unit_square"]))
def test_shape_regularity(seed, start):
    m0 = build_initial(start)
    rng = np.random.default_rng(seed)
    m = _random_rounds(m0, 20, rng)[-1]
    assert m.min_angle() >= 0.49 * m0.min_angle()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_children_partition_parent(seed):
    rng = np.random.default_rng(seed)
    coarse = refine_uniform(l_shape(), 1)
    marked = rng.choice(coarse.n_cells, size=4, replace=False)
    fine = refine(coarse, marked)
    assert np.all(fine.parent >= 0)
    sums = np.zeros(coarse.n_cells)
    np.add.at(sums, fine.parent, fine.areas)
    assert np.allclose(sums, coarse.areas, rtol=1e-13, atol=0)
    # one generation per bisection: a child has 2^-k of its parent's area
    k = fine.generation - coarse.generation[fine.parent]
    assert np.all(k >= 0)
    assert np.allclose(fine.areas, coarse.areas[fine.parent] / 2.0**k, rtol=1e-13, atol=0)
    for t in marked:
        assert np.all(k[fine.parent == t] >= 1)


def test_nested_vertices():
    coarse = refine_uniform(l_shape(), 1)
    fine = refine(coarse, {0, 4})
    assert np.array_equal(fine.vertices[:coarse.n_vertices], coarse.vertices)
    assert fine.n_vertices > coarse.n_vertices


def test_mesh_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 3)), [[0, 1, 2]])
