"""Quadrature on the reference triangle {x, y >= 0, x + y <= 1} and on [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import ceil, sqrt

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = ["QuadratureRule", "make_rule", "line_rule"]

MAX_DEGREE = 19


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Points in barycentric coordinates (Q, 3), weights summing to 1/2."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def xy(self) -> np.ndarray:
        """Reference-triangle Cartesian coordinates (Q, 2)."""
        return self.points[:, 1:]

    def __len__(self):
        return len(self.weights)


def _radon7():
    # 7-point rule of degree 5
    s = sqrt(15.0)
    a1, a2 = (6 - s) / 21, (6 + s) / 21
    w1, w2 = (155 - s) / 2400, (155 + s) / 2400
    pts = [(1 / 3, 1 / 3)]
    wts = [9 / 80]
    for a, w in ((a1, w1), (a2, w2)):
        b = 1 - 2 * a
        pts += [(a, a), (b, a), (a, b)]
        wts += [w, w, w]
    return np.array(pts), np.array(wts)


def _collapsed(degree: int):
    n = max(1, ceil((degree + 1) / 2))
    xi, wj = roots_jacobi(n, 1.0, 0.0)
    eta, wl = roots_legendre(n)
    s = (1 + xi) / 2
    t = (1 + eta) / 2
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(wj / 4, wl / 2)
    x = S.ravel()
    y = ((1 - S) * T).ravel()
    return np.column_stack([x, y]), W.ravel()


@lru_cache(maxsize=None)
def make_rule(degree: int) -> QuadratureRule:
    """Rule exact for polynomials of total degree ``degree`` (1..19).

    Degrees 1, 2 and 5 use the classical symmetric rules (centroid,
    three-point, seven-point); the rest use a collapsed Gauss-Jacobi
    product rule.
    """
    if not 1 <= int(degree) <= MAX_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree}; need 1..{MAX_DEGREE}")
    degree = int(degree)
    if degree == 1:
        xy, w = np.array([[1 / 3, 1 / 3]]), np.array([0.5])
    elif degree == 2:
        xy = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        w = np.full(3, 1 / 6)
    elif degree == 5:
        xy, w = _radon7()
    else:
        xy, w = _collapsed(degree)
    bary = np.column_stack([1 - xy[:, 0] - xy[:, 1], xy])
    bary.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(bary, w, degree)


@lru_cache(maxsize=None)
def line_rule(degree: int = MAX_DEGREE):
    """Gauss-Legendre points on [0, 1] and weights summing to 1."""
    n = max(1, ceil((degree + 1) / 2))
    x, w = roots_legendre(n)
    return (1 + x) / 2, w / 2
