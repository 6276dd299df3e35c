"""Conforming triangular meshes with longest-edge bisection.

A :class:`Mesh` is immutable: :func:`refine` returns a new mesh and never
touches its input.  Edges are numbered by the lexicographic order of their
sorted vertex pairs, which makes every derived quantity deterministic.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "Mesh",
    "ElementGeometry",
    "build_initial",
    "l_shape",
    "unit_square",
    "refine",
    "refine_uniform",
    "interior_edges",
    "patch",
    "write_mesh",
    "read_mesh",
]


@dataclass(frozen=True)
class ElementGeometry:
    cell_id: int
    h_T: float
    area: float
    edge_lengths: np.ndarray
    unit_normals: np.ndarray


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming 2D simplicial mesh.

    Parameters
    ----------
    vertices : (N, 2) array
    cells : (M, 3) int array, counterclockwise.
    parent : (M,) int array, optional
        Index of the cell in the *previous* mesh that contains each cell.
        ``-1`` for cells of an initial mesh.
    generation : (M,) int array, optional
        Number of bisections separating a cell from the initial mesh.
    """

    vertices: np.ndarray
    cells: np.ndarray
    parent: np.ndarray = field(default=None)
    generation: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        c = np.ascontiguousarray(self.cells, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2 or c.ndim != 2 or c.shape[1] != 3:
            raise ValueError("vertices must be (N, 2) and cells (M, 3)")
        par = (np.full(len(c), -1, dtype=np.int64) if self.parent is None
               else np.asarray(self.parent, dtype=np.int64))
        gen = (np.zeros(len(c), dtype=np.int64) if self.generation is None
               else np.asarray(self.generation, dtype=np.int64))
        for name, arr in (("vertices", v), ("cells", c),
                          ("parent", par), ("generation", gen)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def _topology(self):
        c = self.cells
        # local edge k is opposite local vertex k
        loc = np.stack([c[:, [1, 2]], c[:, [2, 0]], c[:, [0, 1]]], axis=1)
        pairs = np.sort(loc.reshape(-1, 2), axis=1)
        edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        inv = inv.ravel()
        cell_edges = inv.reshape(-1, 3)
        counts = np.bincount(inv, minlength=len(edges))
        if (counts > 2).any():
            bad = edges[np.argmax(counts)]
            raise ValueError(f"edge {tuple(bad)} shared by more than two cells")
        owners = np.repeat(np.arange(len(c)), 3)
        order = np.argsort(inv, kind="stable")
        first = np.concatenate([[0], np.cumsum(counts)[:-1]])
        edge_cells = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_cells[:, 0] = owners[order[first]]
        two = counts == 2
        edge_cells[two, 1] = owners[order[first[two] + 1]]
        for arr in (edges, cell_edges, edge_cells):
            arr.setflags(write=False)
        return edges, cell_edges, edge_cells

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) sorted vertex pairs, lexicographically ordered."""
        return self._topology[0]

    @property
    def cell_edges(self) -> np.ndarray:
        """(M, 3) edge ids; local edge k is opposite local vertex k."""
        return self._topology[1]

    @property
    def edge_cells(self) -> np.ndarray:
        """(E, 2) adjacent cells, lower id first; ``-1`` pads boundary edges."""
        return self._topology[2]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return self.edge_cells[:, 1] < 0

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        """(M, 3) lengths of the local edges of every cell."""
        p = self.vertices[self.cells]
        return np.stack([np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                         np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
                         np.linalg.norm(p[:, 1] - p[:, 0], axis=1)], axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        """h_T, the longest edge of every cell."""
        return self.edge_lengths.max(axis=1)

    @cached_property
    def outward_normals(self) -> np.ndarray:
        """(M, 3, 2) outward unit normals of the local edges."""
        p = self.vertices[self.cells]
        t = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        n = np.stack([t[..., 1], -t[..., 0]], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def geometry(self, cell: int) -> ElementGeometry:
        return ElementGeometry(int(cell), float(self.diameters[cell]), float(self.areas[cell]),
                               self.edge_lengths[cell].copy(), self.outward_normals[cell].copy())

    def min_angle(self) -> float:
        """Smallest interior angle over all cells, in radians."""
        L = self.edge_lengths
        a, b, c = L[:, 0], L[:, 1], L[:, 2]
        angles = np.stack([
            np.arccos(np.clip((b**2 + c**2 - a**2) / (2 * b * c), -1, 1)),
            np.arccos(np.clip((a**2 + c**2 - b**2) / (2 * a * c), -1, 1)),
            np.arccos(np.clip((a**2 + b**2 - c**2) / (2 * a * b), -1, 1)),
        ])
        return float(angles.min())

    def is_conforming(self) -> bool:
        """No hanging vertices: no vertex lies in the interior of an edge."""
        try:
            edges = self.edges
        except ValueError:
            return False
        p = self.vertices
        a, b = p[edges[:, 0]], p[edges[:, 1]]
        # only the boundary can reveal hanging nodes once every interior edge
        # has exactly two neighbours; check all edges against all vertices in bulk
        for e0, e1, pa, pb in zip(edges[:, 0], edges[:, 1], a, b):
            d = pb - pa
            rel = p - pa
            t = rel @ d / (d @ d)
            cross = rel[:, 0] * d[1] - rel[:, 1] * d[0]
            inside = (t > 1e-12) & (t < 1 - 1e-12) & (np.abs(cross) < 1e-12 * (d @ d))
            if inside.any():
                return False
        return True


def _shoelace(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _ear_clip(poly: np.ndarray) -> list[tuple[int, int, int]]:
    idx = list(range(len(poly)))
    tris = []

    def area2(i, j, k):
        a, b, c = poly[i], poly[j], poly[k]
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def inside(pt, i, j, k):
        return (area2(i, j, pt) >= 0 and area2(j, k, pt) >= 0 and area2(k, i, pt) >= 0)

    guard = 0
    while len(idx) > 3:
        n = len(idx)
        for m in range(n):
            i, j, k = idx[m - 1], idx[m], idx[(m + 1) % n]
            if area2(i, j, k) <= 0:
                continue
            if any(inside(q, i, j, k) for q in idx if q not in (i, j, k)):
                continue
            tris.append((i, j, k))
            idx.pop(m)
            break
        guard += 1
        if guard > 10 * len(poly):
            raise ValueError("polygon could not be triangulated; is it simple and counterclockwise?")
    tris.append(tuple(idx))
    return tris


def build_initial(domain_spec) -> Mesh:
    """Coarse conforming triangulation of a polygon.

    ``domain_spec`` is either ``"l_shape"``, ``"unit_square"``,
    ``"triangle"`` or an (N, 2) array of counterclockwise polygon vertices,
    which is triangulated by ear clipping.
    """
    if isinstance(domain_spec, str):
        builders = {"l_shape": l_shape, "unit_square": unit_square,
                    "triangle": lambda: Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])}
        try:
            return builders[domain_spec]()
        except KeyError:
            raise ValueError(f"unknown domain {domain_spec!r}") from None
    poly = np.asarray(domain_spec, dtype=float)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise ValueError("polygon must be an (N>=3, 2) array")
    area = _shoelace(poly)
    if abs(area) < 1e-14:
        raise ValueError("degenerate polygon: zero area")
    if area < 0:
        raise ValueError("polygon vertices must be counterclockwise")
    return Mesh(poly, np.array(_ear_clip(poly)))


def unit_square() -> Mesh:
    """Unit square split along the diagonal (0,0)-(1,1)."""
    v = [[0, 0], [1, 0], [1, 1], [0, 1]]
    return Mesh(v, [[0, 1, 2], [0, 2, 3]])


def l_shape() -> Mesh:
    """(-1,1)^2 minus [0,1)x(-1,0] as six right triangles fanned around (0,0)."""
    v = [[0, 0], [1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1]]
    cells = [[0, k, k + 1] for k in range(1, 7)]
    return Mesh(v, cells)


def _edge_key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def refine(mesh: Mesh, marked) -> Mesh:
    """Bisect every marked cell across its longest edge and close conformingly.

    Cells left with a hanging vertex are themselves bisected across their
    longest edge until none remain.  Longest-edge ties go to the edge with
    the smallest (sorted) vertex pair.
    """
    marked = sorted({int(t) for t in marked})
    if not marked:
        return Mesh(mesh.vertices, mesh.cells, np.arange(mesh.n_cells), mesh.generation)
    if marked[0] < 0 or marked[-1] >= mesh.n_cells:
        raise ValueError("marked cell id out of range")

    verts = [tuple(p) for p in mesh.vertices.tolist()]
    cells = [tuple(t) for t in mesh.cells.tolist()]
    ancestor = list(range(len(cells)))
    gen = mesh.generation.tolist()
    alive = [True] * len(cells)
    edge_cells: dict[tuple[int, int], set[int]] = {}
    for t, (a, b, c) in enumerate(cells):
        for e in ((a, b), (b, c), (c, a)):
            edge_cells.setdefault(_edge_key(*e), set()).add(t)
    midpoint: dict[tuple[int, int], int] = {}

    def sqlen(i, j):
        (x0, y0), (x1, y1) = verts[i], verts[j]
        return (x1 - x0) ** 2 + (y1 - y0) ** 2

    def hanging(t):
        a, b, c = cells[t]
        return any(_edge_key(*e) in midpoint for e in ((a, b), (b, c), (c, a)))

    queue = deque(marked)
    while queue:
        t = queue.popleft()
        if not alive[t]:
            continue
        a, b, c = cells[t]
        # rotations putting each edge first, opposite vertex last
        options = [(a, b, c), (b, c, a), (c, a, b)]
        v0, v1, v2 = max(options, key=lambda o: (sqlen(o[0], o[1]),
                                                  tuple(-k for k in _edge_key(o[0], o[1]))))
        key = _edge_key(v0, v1)
        m = midpoint.get(key)
        if m is None:
            (x0, y0), (x1, y1) = verts[v0], verts[v1]
            verts.append(((x0 + x1) / 2, (y0 + y1) / 2))
            m = len(verts) - 1
            midpoint[key] = m
        alive[t] = False
        for e in ((a, b), (b, c), (c, a)):
            edge_cells[_edge_key(*e)].discard(t)
        children = ((v0, m, v2), (m, v1, v2))
        for ch in children:
            cells.append(ch)
            alive.append(True)
            ancestor.append(ancestor[t])
            gen.append(gen[t] + 1)
            cid = len(cells) - 1
            for e in ((ch[0], ch[1]), (ch[1], ch[2]), (ch[2], ch[0])):
                edge_cells.setdefault(_edge_key(*e), set()).add(cid)
        for nb in sorted(edge_cells.get(key, ())):
            queue.append(nb)
        for cid in (len(cells) - 2, len(cells) - 1):
            if hanging(cid):
                queue.append(cid)

    keep = [t for t in range(len(cells)) if alive[t]]
    new = Mesh(np.array(verts), np.array([cells[t] for t in keep]),
               np.array([ancestor[t] for t in keep]), np.array([gen[t] for t in keep]))
    return new


def refine_uniform(mesh: Mesh, times: int = 1) -> Mesh:
    """Bisect every cell ``times`` times over (ancestry tracked to the input mesh)."""
    out = mesh
    parents = np.arange(mesh.n_cells)
    for _ in range(times):
        out = refine(out, range(out.n_cells))
        parents = parents[out.parent]
    return Mesh(out.vertices, out.cells, parents, out.generation)


def interior_edges(mesh: Mesh):
    """Interior edges as ``(edge, lower cell, higher cell, unit normal)``.

    The normal points out of the lower-numbered cell.
    """
    ec = mesh.edge_cells
    out = []
    for e in np.flatnonzero(ec[:, 1] >= 0):
        t0, t1 = int(ec[e, 0]), int(ec[e, 1])
        k = int(np.flatnonzero(mesh.cell_edges[t0] == e)[0])
        out.append((int(e), t0, t1, mesh.outward_normals[t0, k].copy()))
    return out


def patch(mesh: Mesh, cell: int) -> set[int]:
    """Cells sharing an edge with ``cell``, including ``cell`` itself."""
    nb = mesh.edge_cells[mesh.cell_edges[cell]].ravel()
    return {int(t) for t in nb if t >= 0} | {int(cell)}


def write_mesh(mesh: Mesh, path) -> None:
    lines = [f"vertices {mesh.n_vertices} cells {mesh.n_cells}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.cells.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    if len(head) != 4 or head[0] != "vertices" or head[2] != "cells":
        raise ValueError("bad mesh header")
    n, m = int(head[1]), int(head[3])
    v = np.array([[float(s) for s in ln.split()] for ln in text[1:1 + n]])
    c = np.array([[int(s) for s in ln.split()] for ln in text[1 + n:1 + n + m]])
    return Mesh(v, c)
