"""Cached 1D Gauss rules on [0, 1] and tensor-product helpers.

All reference intervals in the package are [0, 1]; rules for subintervals
are produced by affine mapping.  Gauss-Legendre with n points is exact for
polynomials of degree 2n - 1.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg


@lru_cache(maxsize=None)
def gauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    if n < 1:
        raise ValueError("need at least one node")
    x, w = npleg.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


@lru_cache(maxsize=None)
def lobatto(n: int) -> np.ndarray:
    """n Gauss-Lobatto-Legendre nodes on [0, 1] (endpoints included).

    Interior nodes are the roots of P'_{n-1}.  Only the nodes are needed
    here (they serve as interpolation points, not integration points).
    """
    if n < 2:
        raise ValueError("Lobatto rules need at least two nodes")
    if n == 2:
        return np.array([0.0, 1.0])
    coeffs = np.zeros(n)
    coeffs[n - 1] = 1.0
    interior = npleg.legroots(npleg.legder(coeffs))
    nodes = np.concatenate(([-1.0], np.sort(interior), [1.0]))
    return (nodes + 1.0) / 2.0


def n_for_degree(degree: int) -> int:
    """Smallest Gauss point count integrating the given degree exactly."""
    return max(1, degree // 2 + 1)


def map_rule(nodes: np.ndarray, weights: np.ndarray, a: float, b: float):
    """Affinely map a [0, 1] rule to [a, b]."""
    return a + (b - a) * nodes, (b - a) * weights


def tensor_rule(ns: tuple[int, ...], boxes=None):
    """Tensor Gauss rule; returns points (N, k) and weights (N,).

    ``ns`` gives the per-axis point count; ``boxes`` optionally maps each
    axis to an interval (a, b) instead of [0, 1].
    """
    axes = []
    wts = []
    for i, n in enumerate(ns):
        x, w = gauss(n)
        if boxes is not None:
            x, w = map_rule(x, w, *boxes[i])
        axes.append(x)
        wts.append(w)
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wgrid = wts[0]
    for w in wts[1:]:
        wgrid = np.multiply.outer(wgrid, w)
    return pts, wgrid.ravel()


def quadrature(cell, degree: int):
    """Tensor Gauss rule on an absolute box with ``degree`` points per axis.

    ``cell`` is a sequence of per-axis (lo, hi) intervals; the rule is
    exact through polynomial degree 2*degree - 1 along every axis and its
    weights sum to the cell measure.
    """
    boxes = [(float(a), float(b)) for a, b in cell]
    n = max(1, int(degree))
    return tensor_rule((n,) * len(boxes), boxes)
