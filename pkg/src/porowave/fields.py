"""Piecewise-polynomial fields and exact box integration.

Every field in the package is (a combination of) piecewise data over
axis-aligned boxes of a common coordinate frame.  Box boundaries are kept
as exact rationals relative to the frame, so intersecting partitions of
different fields is exact; floating point enters only at quadrature nodes.

The polynomial representation is per-cell tensor Legendre, orthonormal
with respect to the absolute measure of the cell: the squared L2 norm of a
cell is the plain sum of squared coefficients.

Integration requests walk the "pieces" of the participating fields (the
sub-boxes on which each is a single polynomial or smooth expression),
form the common refinement, and apply a tensor Gauss rule sized from the
per-axis degrees, so products of polynomial fields integrate exactly.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg

from .mesh import _index_grid
from .quadrature import gauss, map_rule

Interval = tuple[Fraction, Fraction]
RelBox = tuple  # tuple of Interval, one per axis

UNIT = (Fraction(0), Fraction(1))


# ---------------------------------------------------------------------------
# reference Legendre helpers on [0, 1]


@lru_cache(maxsize=None)
def _leg_norms(n: int) -> np.ndarray:
    return np.sqrt(2.0 * np.arange(n) + 1.0)


def leg_vander(s: np.ndarray, n: int) -> np.ndarray:
    """Values of the n orthonormal Legendre polynomials on [0,1] at s."""
    V = npleg.legvander(2.0 * np.asarray(s, dtype=float) - 1.0, n - 1)
    return V * _leg_norms(n)


@lru_cache(maxsize=None)
def _leg_deriv_matrix(n: int) -> np.ndarray:
    """Matrix D with d(phi_k)/ds = sum_j D[j,k] * P_j(2s-1)."""
    D = np.zeros((n, n))
    for k in range(n):
        c = np.zeros(n)
        c[k] = 1.0
        der = npleg.legder(c)
        D[: len(der), k] = der
    return D * (2.0 * _leg_norms(n))


def leg_vander_deriv(s: np.ndarray, n: int) -> np.ndarray:
    """Derivatives d(phi_k)/ds at s for the orthonormal basis."""
    P = npleg.legvander(2.0 * np.asarray(s, dtype=float) - 1.0, n - 1)
    return P @ _leg_deriv_matrix(n)


def eval_tensor(coeffs: np.ndarray, vanders: list[np.ndarray]) -> np.ndarray:
    """Contract per-axis Vandermonde rows against a coefficient tensor."""
    arr = np.tensordot(vanders[0], coeffs, axes=(1, 0))
    for V in vanders[1:]:
        arr = np.einsum("pj,pj...->p...", V, arr)
    return arr


def accumulate_tensor(wf: np.ndarray, vanders: list[np.ndarray]) -> np.ndarray:
    """Sum_q wf[q] * outer(vanders[0][q], vanders[1][q], ...)."""
    k = len(vanders)
    if k == 1:
        return np.einsum("q,qa->a", wf, vanders[0])
    if k == 2:
        return np.einsum("q,qa,qb->ab", wf, vanders[0], vanders[1])
    if k == 3:
        return np.einsum("q,qa,qb,qc->abc", wf, vanders[0], vanders[1], vanders[2])
    raise ValueError("only up to three axes supported")


# ---------------------------------------------------------------------------
# boxes


def box_intersect(a: RelBox, b: RelBox):
    out = []
    for (alo, ahi), (blo, bhi) in zip(a, b):
        lo = max(alo, blo)
        hi = min(ahi, bhi)
        if lo >= hi:
            return None
        out.append((lo, hi))
    return tuple(out)


def box_measure_rel(box: RelBox) -> Fraction:
    m = Fraction(1)
    for lo, hi in box:
        m *= hi - lo
    return m


def abs_box(bounds, box: RelBox):
    lo = np.array([a + (b - a) * float(iv[0]) for (a, b), iv in zip(bounds, box)])
    hi = np.array([a + (b - a) * float(iv[1]) for (a, b), iv in zip(bounds, box)])
    return lo, hi


@dataclass
class Piece:
    """One sub-box on which a field is a single polynomial or smooth map.

    ``degs`` is the exact per-axis polynomial degree, or None when the
    field is merely smooth there; ``owner.eval_piece(payload, pts)``
    evaluates the field without point location.
    """

    box: RelBox
    degs: tuple | None
    owner: object
    payload: object

    def eval(self, pts: np.ndarray) -> np.ndarray:
        return self.owner.eval_piece(self.payload, pts)


# ---------------------------------------------------------------------------
# partition backends for LegendreField


class TreeBackend:
    """Cells are the leaves of a SpaceTimeMesh (in mesh.leaves order)."""

    def __init__(self, mesh):
        self.mesh = mesh
        self._splits = None

    def n_cells(self):
        return len(self.mesh.leaves)

    def rel_box(self, i):
        return self.mesh.rel_box(self.mesh.leaves[i])

    def locate_rel(self, pts):
        return self.mesh.locate_rel(pts)

    def intersecting(self, box: RelBox):
        if self._splits is None:
            self._splits = self.mesh.split_set()
        nt, nxs = self.mesh.macro
        out = []
        stack = [(0, it, ix) for it in range(nt) for ix in _index_grid(nxs)]
        while stack:
            k = stack.pop()
            rb = self.mesh.rel_box(k)
            if box_intersect(rb, box) is None:
                continue
            if k in self._splits:
                stack.extend(self.mesh.children(k))
            else:
                out.append(self.mesh._leaf_index[k])
        return sorted(out)


class StackPartition:
    """Product partition: spatial columns x global time atoms.

    ``columns`` are disjoint spatial relative boxes covering the unit box;
    ``cuts`` are global time breakpoints including 0 and 1.  Cell order is
    column-major in time: cell = col * n_atoms + atom.
    """

    def __init__(self, columns, cuts):
        self.columns = tuple(columns)
        self.cuts = tuple(cuts)
        if self.cuts[0] != 0 or self.cuts[-1] != 1:
            raise ValueError("cuts must span [0, 1]")
        self.n_atoms = len(self.cuts) - 1
        self._col_lo = None

    def n_cells(self):
        return len(self.columns) * self.n_atoms

    def rel_box(self, i):
        col, atom = divmod(i, self.n_atoms)
        tint = (self.cuts[atom], self.cuts[atom + 1])
        return (tint,) + self.columns[col]

    def _locate_col(self, pts_x) -> np.ndarray:
        # containment scan with (lo, hi] convention, lower domain edge closed
        out = np.full(len(pts_x), -1, dtype=int)
        for ci, col in enumerate(self.columns):
            ok = np.ones(len(pts_x), dtype=bool)
            for a, (flo, fhi) in enumerate(col):
                lo, hi = float(flo), float(fhi)
                lower = pts_x[:, a] >= lo - 1e-13 if flo == 0 else pts_x[:, a] > lo
                ok &= lower & (pts_x[:, a] <= hi)
            take = ok & (out < 0)
            out[take] = ci
        if np.any(out < 0):
            raise ValueError("point outside spatial partition")
        return out

    def locate_rel(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cols = self._locate_col(pts[:, 1:])
        cf = [float(c) for c in self.cuts]
        atoms = np.clip(
            np.searchsorted(cf, pts[:, 0], side="left") - 1, 0, self.n_atoms - 1
        )
        return cols * self.n_atoms + atoms

    def intersecting(self, box: RelBox):
        tlo, thi = box[0]
        a0 = bisect.bisect_right(self.cuts, tlo) - 1
        a1 = bisect.bisect_left(self.cuts, thi)
        a0 = max(a0, 0)
        out = []
        for ci, col in enumerate(self.columns):
            if all(c[0] < b[1] and b[0] < c[1] for c, b in zip(col, box[1:])):
                out.extend(ci * self.n_atoms + a for a in range(a0, a1))
        return out


# ---------------------------------------------------------------------------
# fields


class LegendreField:
    """Piecewise tensor-Legendre field over a partition backend.

    coeffs[i] has one axis per coordinate; the basis is orthonormal with
    respect to the absolute measure, so ``norm2()`` is a plain sum of
    squares.
    """

    def __init__(self, bounds, backend, coeffs):
        self.bounds = [tuple(map(float, b)) for b in bounds]
        self.backend = backend
        self.coeffs = list(coeffs)
        if backend.n_cells() != len(self.coeffs):
            raise ValueError("one coefficient tensor per cell required")
        self._geom = [abs_box(self.bounds, backend.rel_box(i))
                      for i in range(backend.n_cells())]

    @property
    def n_axes(self):
        return len(self.bounds)

    def degs(self, i):
        return tuple(n - 1 for n in self.coeffs[i].shape)

    def cell_scale(self, i) -> float:
        lo, hi = self._geom[i]
        return float(np.prod(hi - lo)) ** -0.5

    def eval_piece(self, payload, pts):
        i = payload
        lo, hi = self._geom[i]
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        s = (pts - lo) / (hi - lo)
        vanders = [leg_vander(s[:, a], self.coeffs[i].shape[a])
                   for a in range(self.n_axes)]
        return eval_tensor(self.coeffs[i], vanders) * self.cell_scale(i)

    def eval_abs(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        rel = np.stack(
            [(pts[:, a] - b[0]) / (b[1] - b[0]) for a, b in enumerate(self.bounds)],
            axis=1,
        )
        cells = self.backend.locate_rel(rel)
        out = np.empty(len(pts))
        for i in np.unique(cells):
            m = cells == i
            out[m] = self.eval_piece(int(i), pts[m])
        return out

    def pieces_in(self, box: RelBox):
        out = []
        for i in self.backend.intersecting(box):
            ib = box_intersect(self.backend.rel_box(i), box)
            if ib is not None:
                out.append(Piece(ib, self.degs(i), self, i))
        return out

    def trace_pieces(self, t_rel: Fraction = Fraction(1)):
        """Spatial pieces of the time trace at t_rel (limit from below)."""
        out = []
        for i in range(self.backend.n_cells()):
            rb = self.backend.rel_box(i)
            if rb[0][0] < t_rel <= rb[0][1]:
                out.append(
                    Piece(rb[1:], self.degs(i)[1:], _TraceAdapter(self, t_rel), i)
                )
        return out

    def norm2(self) -> float:
        return float(sum(np.sum(c**2) for c in self.coeffs))

    def dofs(self) -> int:
        return int(sum(c.size for c in self.coeffs))


class _TraceAdapter:
    def __init__(self, field: LegendreField, t_rel):
        self.field = field
        t0, t1 = field.bounds[0]
        self.t_abs = t0 + (t1 - t0) * float(t_rel)

    def eval_piece(self, payload, pts_x):
        pts_x = np.atleast_2d(np.asarray(pts_x, dtype=float))
        full = np.column_stack([np.full(len(pts_x), self.t_abs), pts_x])
        return self.field.eval_piece(payload, full)


class SpatialData:
    """Piecewise data on the spatial box alone (initial values, traces).

    Each piece is (relbox, coeffs-or-callable).  Polynomial pieces use the
    same orthonormal Legendre convention as LegendreField; callable pieces
    evaluate arbitrary smooth formulas on absolute coordinates.
    """

    def __init__(self, bounds, pieces):
        self.bounds = [tuple(map(float, b)) for b in bounds]
        # entries: (relbox, ("poly", ndarray) | ("fn", callable))
        self.entries = list(pieces)

    @classmethod
    def constant(cls, bounds, value: float):
        d = len(bounds)
        vol = float(np.prod([b - a for a, b in bounds]))
        coeff = np.full((1,) * d, float(value) * vol**0.5)
        return cls(bounds, [(tuple(UNIT for _ in range(d)), ("poly", coeff))])

    @classmethod
    def step_1d(cls, bounds, breaks, values):
        """Piecewise constants on (lo, b1), (b1, b2), ...; breaks are
        Fractions relative to the axis."""
        cuts = [Fraction(0)] + [Fraction(b) for b in breaks] + [Fraction(1)]
        (a, b), = bounds
        pieces = []
        for lo, hi, v in zip(cuts[:-1], cuts[1:], values):
            width = (b - a) * float(hi - lo)
            pieces.append((((lo, hi),), ("poly", np.array([float(v) * width**0.5]))))
        return cls(bounds, pieces)

    def d(self):
        return len(self.bounds)

    def eval_piece(self, payload, pts):
        kind, data, box = payload
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if kind == "fn":
            return np.asarray(data(pts), dtype=float)
        lo, hi = abs_box(self.bounds, box)
        s = (pts - lo) / (hi - lo)
        vanders = [leg_vander(s[:, a], data.shape[a]) for a in range(self.d())]
        scale = float(np.prod(hi - lo)) ** -0.5
        return eval_tensor(data, vanders) * scale

    def pieces_in(self, box: RelBox):
        out = []
        for pbox, (kind, data) in self.entries:
            ib = box_intersect(pbox, box)
            if ib is None:
                continue
            degs = tuple(n - 1 for n in data.shape) if kind == "poly" else None
            out.append(Piece(ib, degs, self, (kind, data, pbox)))
        return out

    def eval_abs(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        rel = np.stack(
            [(pts[:, a] - b[0]) / (b[1] - b[0]) for a, b in enumerate(self.bounds)],
            axis=1,
        )
        out = np.full(len(pts), np.nan)
        done = np.zeros(len(pts), dtype=bool)
        for pbox, (kind, data) in self.entries:
            lo = np.array([float(iv[0]) for iv in pbox])
            hi = np.array([float(iv[1]) for iv in pbox])
            inside = np.all((rel > lo - 1e-14) & (rel <= hi + 1e-14), axis=1)
            take = inside & ~done
            if np.any(take):
                out[take] = self.eval_piece((kind, data, pbox), pts[take])
                done |= take
        if not np.all(done):
            raise ValueError("point outside spatial data")
        return out

    def breakpoints(self, axis: int):
        """Interior piece boundaries along one axis (jump candidates)."""
        cuts = set()
        for pbox, _ in self.entries:
            cuts.add(pbox[axis][0])
            cuts.add(pbox[axis][1])
        return sorted(c for c in cuts if 0 < c < 1)

    def is_zero(self) -> bool:
        for _, (kind, data) in self.entries:
            if kind != "poly" or np.any(data != 0):
                return False
        return True


class TimeConstant:
    """Space-time view of spatial data, constant in time."""

    def __init__(self, data: SpatialData, t_bounds):
        self.data = data
        self.bounds = [tuple(map(float, t_bounds))] + list(data.bounds)

    def eval_piece(self, payload, pts):
        return self.data.eval_piece(payload, np.atleast_2d(pts)[:, 1:])

    def eval_abs(self, pts):
        return self.data.eval_abs(np.atleast_2d(pts)[:, 1:])

    def pieces_in(self, box: RelBox):
        out = []
        for p in self.data.pieces_in(box[1:]):
            degs = None if p.degs is None else (0,) + p.degs
            out.append(Piece((box[0],) + p.box, degs, self, p.payload))
        return out

    def trace_pieces(self, t_rel=Fraction(1)):
        return self.data.pieces_in(tuple(UNIT for _ in range(self.data.d())))


class ComposedField:
    """fn applied pointwise to a base field.

    ``deg_multiplier`` declares that fn is a polynomial of that degree, so
    piece degrees stay exact; None marks fn as merely smooth.
    """

    def __init__(self, base, fn, deg_multiplier=None):
        self.base = base
        self.fn = fn
        self.mult = deg_multiplier
        self.bounds = base.bounds

    def eval_piece(self, payload, pts):
        return self.fn(self.base.eval_piece(payload, pts))

    def eval_abs(self, pts):
        return self.fn(self.base.eval_abs(pts))

    def pieces_in(self, box: RelBox):
        out = []
        for p in self.base.pieces_in(box):
            if p.degs is None or self.mult is None:
                degs = None
            else:
                degs = tuple(self.mult * d for d in p.degs)
            out.append(Piece(p.box, degs, self, p.payload))
        return out

    def trace_pieces(self, t_rel=Fraction(1)):
        out = []
        for p in self.base.trace_pieces(t_rel):
            if p.degs is None or self.mult is None:
                degs = None
            else:
                degs = tuple(self.mult * d for d in p.degs)
            out.append(Piece(p.box, degs, _ComposedTrace(self.fn, p), p.payload))
        return out


class _ComposedTrace:
    def __init__(self, fn, piece):
        self.fn = fn
        self.piece = piece

    def eval_piece(self, payload, pts):
        return self.fn(self.piece.owner.eval_piece(payload, pts))


class CallableField:
    """Smooth closed-form field given on absolute coordinates."""

    def __init__(self, bounds, fn, degs=None):
        self.bounds = [tuple(map(float, b)) for b in bounds]
        self.fn = fn
        self._degs = degs

    def eval_piece(self, payload, pts):
        return np.asarray(self.fn(np.atleast_2d(pts)), dtype=float)

    def eval_abs(self, pts):
        return self.eval_piece(None, pts)

    def pieces_in(self, box: RelBox):
        return [Piece(box, self._degs, self, None)]

    def trace_pieces(self, t_rel=Fraction(1)):
        t0, t1 = self.bounds[0]
        t_abs = t0 + (t1 - t0) * float(t_rel)

        def fn_x(pts_x):
            pts_x = np.atleast_2d(pts_x)
            return self.fn(np.column_stack([np.full(len(pts_x), t_abs), pts_x]))

        d = len(self.bounds) - 1
        spatial = CallableField(self.bounds[1:], fn_x,
                                None if self._degs is None else self._degs[1:])
        return [Piece(tuple(UNIT for _ in range(d)), spatial._degs, spatial, None)]


# ---------------------------------------------------------------------------
# integration engines


def common_pieces(box: RelBox, fields):
    """Common refinement of the fields' pieces within box.

    Returns (sub-box, [piece per field]) entries covering box.
    """
    current = [(box, [])]
    for f in fields:
        nxt = []
        for sub, owners in current:
            for p in f.pieces_in(sub):
                ib = box_intersect(p.box, sub)
                if ib is not None:
                    nxt.append((ib, owners + [p]))
        current = nxt
    return current


def _rule_counts(deglists, n_axes, smooth_n, extra_degs=None):
    """Per-axis Gauss point counts integrating the product exactly.

    ``deglists`` is a list of per-axis degree tuples (None = smooth); the
    product degree per axis is their sum plus ``extra_degs``.
    """
    ns = []
    for a in range(n_axes):
        total = 0
        smooth = False
        for degs in deglists:
            if degs is None:
                smooth = True
            else:
                total += degs[a]
        if extra_degs is not None:
            total += extra_degs[a]
        n = total // 2 + 1
        if smooth:
            n = max(n, smooth_n)
        ns.append(min(max(n, 1), 24))
    return ns


def _piece_rule(bounds, box: RelBox, ns):
    axes = []
    wts = []
    for (blo, bhi), (lo, hi), n in zip(bounds, box, ns):
        x, w = gauss(n)
        a = blo + (bhi - blo) * float(lo)
        b = blo + (bhi - blo) * float(hi)
        x, w = map_rule(x, w, a, b)
        axes.append(x)
        wts.append(w)
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wgrid = wts[0]
    for w in wts[1:]:
        wgrid = np.multiply.outer(wgrid, w)
    return pts, wgrid.ravel()


def eval_terms(terms, pieces, pts):
    """Sum of weighted term values at pts, given one piece per term."""
    vals = np.zeros(len(pts))
    for (w, _), p in zip(terms, pieces):
        vals += w * p.eval(pts)
    return vals


def norm2_box(bounds, box: RelBox, terms, smooth_n: int = 10) -> float:
    """Integral of (sum_i w_i f_i)^2 over the absolute image of box."""
    fields = [f for _, f in terms]
    total = 0.0
    for sub, pieces in common_pieces(box, fields):
        degs = [p.degs for p in pieces]
        ns = _rule_counts([d for d in degs] * 2, len(bounds), smooth_n)
        pts, w = _piece_rule(bounds, sub, ns)
        vals = eval_terms(terms, pieces, pts)
        total += float(w @ vals**2)
    return total


def inner_box(bounds, box: RelBox, terms_a, terms_b, smooth_n: int = 10) -> float:
    """Integral of (sum w_i f_i) * (sum v_j g_j) over box."""
    fields = [f for _, f in terms_a] + [f for _, f in terms_b]
    na = len(terms_a)
    total = 0.0
    for sub, pieces in common_pieces(box, fields):
        degs = [p.degs for p in pieces]
        ns = _rule_counts(degs, len(bounds), smooth_n)
        pts, w = _piece_rule(bounds, sub, ns)
        va = eval_terms(terms_a, pieces[:na], pts)
        vb = eval_terms(terms_b, pieces[na:], pts)
        total += float(w @ (va * vb))
    return total


def gram_legendre(bounds, box: RelBox, terms, shape, smooth_n: int = 10) -> np.ndarray:
    """Coefficients <f, Phi_k> of f against the orthonormal basis of box."""
    fields = [f for _, f in terms]
    lo, hi = abs_box(bounds, box)
    scale = float(np.prod(hi - lo)) ** -0.5
    out = np.zeros(shape)
    out_degs = tuple(n - 1 for n in shape)
    for sub, pieces in common_pieces(box, fields):
        degs = [p.degs for p in pieces]
        ns = _rule_counts(degs, len(bounds), smooth_n, extra_degs=out_degs)
        pts, w = _piece_rule(bounds, sub, ns)
        vals = eval_terms(terms, pieces, pts)
        s = (pts - lo) / (hi - lo)
        vanders = [leg_vander(s[:, a], shape[a]) for a in range(len(shape))]
        out += accumulate_tensor(w * vals, vanders) * scale
    return out


def trace_terms(terms):
    """Spatial-trace view of space-time terms at the slice's final time."""
    out = []
    for w, f in terms:
        out.append((w, _TraceView(f)))
    return out


class _TraceView:
    def __init__(self, field):
        self.field = field
        self.bounds = field.bounds[1:]

    def pieces_in(self, box: RelBox):
        out = []
        for p in self.field.trace_pieces(Fraction(1)):
            ib = box_intersect(p.box, box)
            if ib is not None:
                out.append(Piece(ib, p.degs, p.owner, p.payload))
        return out

    def eval_piece(self, payload, pts):
        raise RuntimeError("evaluate trace pieces, not the view")


def project_box(bounds, box: RelBox, terms, shape, smooth_n: int = 10):
    """L2-best tensor-Legendre coefficients of f on box and the error^2."""
    c = gram_legendre(bounds, box, terms, shape, smooth_n)
    f2 = norm2_box(bounds, box, terms, smooth_n)
    err2 = max(f2 - float(np.sum(c**2)), 0.0)
    return c, err2


def project_function(bounds, backend, shape, fn, smooth_n: int = 12,
                     degs=None) -> LegendreField:
    """Cellwise L2 projection of a callable onto a partition."""
    terms = [(1.0, CallableField(bounds, fn, degs))]
    coeffs = [
        gram_legendre(bounds, backend.rel_box(i), terms, shape, smooth_n)
        for i in range(backend.n_cells())
    ]
    return LegendreField(bounds, backend, coeffs)


@lru_cache(maxsize=None)
def _ortho_deriv_matrix(n: int) -> np.ndarray:
    """M with d(phi_k)/ds = sum_j M[j,k] phi_j (orthonormal basis)."""
    return _leg_deriv_matrix(n) / _leg_norms(n)[:, None]


def axis_derivative(field: LegendreField, axis: int) -> LegendreField:
    """Exact cellwise partial derivative along one absolute axis."""
    out = []
    for i, c in enumerate(field.coeffs):
        lo, hi = field._geom[i]
        M = _ortho_deriv_matrix(c.shape[axis])
        dc = np.moveaxis(
            np.tensordot(M, np.moveaxis(c, axis, 0), axes=1), 0, axis)
        out.append(dc / (hi[axis] - lo[axis]))
    return LegendreField(field.bounds, field.backend, out)


def trace_field(field: LegendreField, t_rel: Fraction = Fraction(1)) -> SpatialData:
    """Time trace as spatial polynomial data (limit from below at t_rel).

    The spatial coefficients come straight from the space-time ones, so
    handing the trace to the next slice loses nothing.
    """
    pieces = []
    for i in range(field.backend.n_cells()):
        rb = field.backend.rel_box(i)
        if not rb[0][0] < t_rel <= rb[0][1]:
            continue
        s_t = float((t_rel - rb[0][0]) / (rb[0][1] - rb[0][0]))
        c = field.coeffs[i]
        phi_t = leg_vander(np.array([s_t]), c.shape[0])[0]
        t0, t1 = field.bounds[0]
        h_t = (t1 - t0) * float(rb[0][1] - rb[0][0])
        cx = np.tensordot(phi_t, c, axes=(0, 0)) / h_t**0.5
        pieces.append((rb[1:], ("poly", cx)))
    return SpatialData([b for b in field.bounds[1:]], pieces)


def evaluate(field, points) -> np.ndarray:
    """Pointwise values, rejecting points outside the field's box."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    for a, (lo, hi) in enumerate(field.bounds):
        pad = 1e-12 * (hi - lo)
        if np.any(pts[:, a] < lo - pad) or np.any(pts[:, a] > hi + pad):
            raise ValueError("point outside domain")
    return field.eval_abs(pts)


def trace_at(field: LegendreField, t_star: float) -> SpatialData:
    """Spatial trace at an absolute time inside the field's time span."""
    t0, t1 = field.bounds[0]
    if not t0 < t_star <= t1:
        if t_star == t0:
            # limit from above: reuse the bottom cells by mirroring
            pieces = []
            for i in range(field.backend.n_cells()):
                rb = field.backend.rel_box(i)
                if rb[0][0] != 0:
                    continue
                c = field.coeffs[i]
                phi_t = leg_vander(np.array([0.0]), c.shape[0])[0]
                h_t = (t1 - t0) * float(rb[0][1] - rb[0][0])
                cx = np.tensordot(phi_t, c, axes=(0, 0)) / h_t**0.5
                pieces.append((rb[1:], ("poly", cx)))
            return SpatialData([b for b in field.bounds[1:]], pieces)
        raise ValueError("time outside slice span")
    rel = Fraction(t_star - t0) / Fraction(t1 - t0)
    return trace_field(field, rel)
