"""Cellwise tensor Chebyshev-Gauss-Lobatto interpolation.

The porosity update needs a polynomial stand-in for the nonlinear
integrand before it can integrate exactly in time.  We interpolate per
cell at tensor CGL nodes and pick the order N from the a priori sup-error
bound

    (1 / (4^(N-1) N!)) * sum_r (2/pi log N + 1)^(D-r) h_r^N |d^N_r f|_inf,

raising N until the bound clears the interpolation tolerance or the cap
is hit, in which case the caller refines cells instead.
"""

from __future__ import annotations

import math

import numpy as np

from .fields import (LegendreField, StackPartition, TreeBackend, abs_box,
                     leg_vander)
from .mesh import SpaceTimeMesh, TimeStackMesh, rel_interval


def cgl_points(n: int) -> np.ndarray:
    """CGL nodes cos(pi*(i-1)/(n-1)), i=1..n, mapped to [0,1].

    The first node maps to 1 and the last to 0, matching the cosine
    ordering; callers that need ascending order can flip.
    """
    if n < 2:
        raise ValueError("need at least two interpolation nodes")
    i = np.arange(n)
    return (1.0 + np.cos(np.pi * i / (n - 1))) / 2.0


def backend_of(mesh):
    """Partition backend (and root bounds) for either mesh flavour."""
    if isinstance(mesh, TimeStackMesh):
        skeys = sorted({c[0] for c in mesh.cells})
        _, nxs = mesh.macro
        cols = []
        for lvl, ix in skeys:
            cols.append(tuple(rel_interval(nxs[j], lvl, ix[j])
                              for j in range(len(nxs))))
        backend = StackPartition(cols, mesh.cuts)
        order = {}
        for ci, sk in enumerate(skeys):
            for ai in range(backend.n_atoms):
                cell = (sk, mesh.cuts[ai], mesh.cuts[ai + 1])
                order[ci * backend.n_atoms + ai] = cell
        return backend, mesh.cylinder.bounds
    if isinstance(mesh, SpaceTimeMesh):
        return TreeBackend(mesh), mesh.cylinder.bounds
    raise TypeError("unsupported mesh type")


def _eval_any(f, pts: np.ndarray) -> np.ndarray:
    if hasattr(f, "eval_abs"):
        return np.asarray(f.eval_abs(pts), dtype=float)
    return np.asarray(f(pts), dtype=float)


def _eval_cells(f, cell_pts, cell_ids) -> np.ndarray:
    """Values of f over per-cell point batches.

    Nodes sit on cell boundaries, where a piecewise function is ambiguous;
    objects exposing ``eval_cell(i, pts)`` get the owning cell's index so
    they can take the one-sided value from inside that cell.
    """
    if hasattr(f, "eval_cell"):
        return np.concatenate([
            np.asarray(f.eval_cell(i, pts), dtype=float)
            for i, pts in zip(cell_ids, cell_pts)
        ])
    return _eval_any(f, np.concatenate(cell_pts, axis=0))


class ChebInterpolant:
    """Per-cell tensor Lagrange data at CGL nodes."""

    def __init__(self, bounds, backend, values, n: int):
        self.bounds = bounds
        self.backend = backend
        self.values = values  # list of (n,)*(d+1) tensors, cell order
        self.n = n
        self._field = None

    def to_field(self) -> LegendreField:
        """Exact change of basis to cellwise orthonormal Legendre."""
        if self._field is not None:
            return self._field
        nodes = cgl_points(self.n)
        conv = np.linalg.inv(leg_vander(nodes, self.n))
        coeffs = []
        for i, vals in enumerate(self.values):
            c = vals
            for ax in range(c.ndim):
                c = np.moveaxis(np.tensordot(conv, np.moveaxis(c, ax, 0),
                                             axes=1), 0, ax)
            lo, hi = abs_box(self.bounds, self.backend.rel_box(i))
            coeffs.append(c * float(np.prod(hi - lo)) ** 0.5)
        self._field = LegendreField(self.bounds, self.backend, coeffs)
        return self._field

    def eval_abs(self, pts: np.ndarray) -> np.ndarray:
        return self.to_field().eval_abs(pts)


def cheb_interpolate(f, mesh, n: int) -> ChebInterpolant:
    """Interpolate f at tensor CGL nodes on every cell of the mesh."""
    if n < 2:
        raise ValueError("interpolation order must be at least 2")
    backend, bounds = backend_of(mesh)
    ref = cgl_points(n)
    d1 = len(bounds)
    boxes = []
    all_pts = []
    for i in range(backend.n_cells()):
        lo, hi = abs_box(bounds, backend.rel_box(i))
        axes = [lo[a] + (hi[a] - lo[a]) * ref for a in range(d1)]
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        boxes.append((lo, hi))
        all_pts.append(pts)
    vals = _eval_cells(f, all_pts, range(backend.n_cells()))
    values = []
    off = 0
    for pts in all_pts:
        m = len(pts)
        values.append(vals[off:off + m].reshape((n,) * d1))
        off += m
    return ChebInterpolant(bounds, backend, values, n)


def printed_bound(n: int, widths, deriv_sups) -> float:
    """A priori CGL interpolation bound from per-axis Nth-derivative sups."""
    d1 = len(widths)
    leb = 2.0 / math.pi * math.log(n) + 1.0
    lead = 1.0 / (4.0 ** (n - 1) * math.factorial(n))
    total = 0.0
    for r in range(d1):
        total += leb ** (d1 - 1 - r) * widths[r] ** n * deriv_sups[r]
    return lead * total


def derivative_sups(f, mesh, n_max: int, n_probe: int | None = None):
    """Finite-difference estimates of max |d^N f| per cell, axis and order.

    One uniform probe tensor per cell serves every order 2..n_max; the
    N-th forward difference over step h approximates h^N f^(N).  Returns
    {N: array (n_cells, D)} with a modest safety factor folded in.
    """
    backend, bounds = backend_of(mesh)
    d1 = len(bounds)
    npb = n_probe if n_probe is not None else n_max + 4
    all_pts = []
    steps = []
    for i in range(backend.n_cells()):
        lo, hi = abs_box(bounds, backend.rel_box(i))
        axes = [np.linspace(lo[a], hi[a], npb) for a in range(d1)]
        grids = np.meshgrid(*axes, indexing="ij")
        all_pts.append(np.stack([g.ravel() for g in grids], axis=-1))
        steps.append((hi - lo) / (npb - 1))
    vals = _eval_cells(f, all_pts, range(backend.n_cells()))
    tables = []
    off = 0
    for _ in range(backend.n_cells()):
        m = npb ** d1
        tables.append(vals[off:off + m].reshape((npb,) * d1))
        off += m
    safety = 2.0
    out = {}
    for order in range(2, n_max + 1):
        est = np.zeros((backend.n_cells(), d1))
        for i, tab in enumerate(tables):
            for a in range(d1):
                diff = np.diff(tab, order, axis=a)
                est[i, a] = safety * np.max(np.abs(diff)) / steps[i][a] ** order
        out[order] = est
    return out


def select_order(f, mesh, tol_int: float, n_max: int = 12):
    """Smallest CGL order whose bound clears tol_int on every cell.

    Returns (n, per_cell_bounds, bad_cells) where bad_cells lists cell
    indices still above tol_int at n_max (refine those and retry).
    """
    backend, bounds = backend_of(mesh)
    sups = derivative_sups(f, mesh, n_max)
    widths = []
    for i in range(backend.n_cells()):
        lo, hi = abs_box(bounds, backend.rel_box(i))
        widths.append(hi - lo)
    best = None
    for order in range(2, n_max + 1):
        cell_bounds = np.array([
            printed_bound(order, widths[i], sups[order][i])
            for i in range(backend.n_cells())
        ])
        best = (order, cell_bounds)
        if np.all(cell_bounds <= tol_int):
            return order, cell_bounds, []
    order, cell_bounds = best
    bad = [int(i) for i in np.nonzero(cell_bounds > tol_int)[0]]
    return order, cell_bounds, bad
