"""Space-time least-squares solver for the linearized pressure system.

The pair (u, w) minimizes the squared residual norm of the first-order
system

    r1   = dt u + div w + c u - g1     (parabolic block)
    r2_i = w_i + A d_i u - g2_i        (flux blocks, one per spatial axis)
    r3   = u(slice start, .) - u0      (initial trace)

over the conforming tensor-product spaces, with coefficients frozen at a
porosity field and a previous pressure iterate.  c and g1 encode the
chosen linearization of the nonlinear reaction term B u / sigma(u); the
right-hand side g2 carries the buoyancy load -A zeta.  In the viscous
variant the dt term and the trace block are absent and time enters only
through the coefficients.

All residual integrals are evaluated on the common refinement of the
coefficient pieces with Gauss rules sized from the piece degrees, so they
are exact whenever the data is piecewise polynomial.  Per-cell squared
residuals drive Doerfler marking; refinement keeps meshes nested, which
makes the total residual nonincreasing for fixed coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .fields import (
    ComposedField,
    SpatialData,
    TimeConstant,
    UNIT,
    _piece_rule,
    axis_derivative,
    common_pieces,
    norm2_box,
    trace_at,
)
from .model import ModelSpec, SigmaSpec, eval_sigma, eval_sigma_prime
from .spaces import LsqSpaceConfig, flux_space, pressure_space


class BudgetError(RuntimeError):
    """Raised when a solve hits its refinement or dof budget.

    Carries the best state reached so far in ``state``.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class NonContractionError(RuntimeError):
    """Picard residuals stopped shrinking; the time slice is too long."""

    def __init__(self, message, state=None, history=None):
        super().__init__(message)
        self.state = state
        self.history = history or []


@dataclass
class FrozenCoefficients:
    """Coefficient fields of one linearized solve.

    A, B and zeta are space-time fields of the frozen porosity (already
    including any 1/Q factor and the buoyancy direction); u_bar is the
    pressure iterate the reaction term is linearized at.  source1 and
    source2 are optional extra right-hand sides for manufactured
    problems.
    """

    A: object
    B: object
    zeta: list
    u_bar: object
    u0: object
    sigma: SigmaSpec
    linearization: str = "quasilinear"
    viscous: bool = False
    source1: object = None
    source2: list = None

    def __post_init__(self):
        if self.linearization not in ("quasilinear", "gauss_newton"):
            raise ValueError(f"unknown linearization {self.linearization!r}")

    @property
    def d(self):
        return len(self.zeta)

    def needs_u_bar(self):
        if self.sigma.constant:
            return False
        return True

    def relinearized(self, u_field) -> "FrozenCoefficients":
        """Same data with the reaction term taken at u_field directly."""
        return replace(self, u_bar=u_field, linearization="quasilinear")


def frozen_coefficients(model: ModelSpec, phi, u_bar, u0,
                        linearization: str = "quasilinear") -> FrozenCoefficients:
    """Build the coefficient fields for one linearization of the model.

    phi is a space-time field of the porosity state variable (the log
    variable for the log-transformed form); u_bar the previous pressure
    iterate; u0 the initial/incoming pressure trace (None in the viscous
    limit).
    """
    inv_q = 1.0 if model.viscous else 1.0 / model.Q
    c_phi, m, f = model.c_phi, model.m, model.f
    m_int = int(m) if float(m).is_integer() else None

    if model.form == "log_transformed":
        def alpha_fn(v):
            return inv_q * (c_phi * -np.expm1(-v)) ** 3

        def beta_fn(v):
            return inv_q * (-np.expm1(-v)) ** m

        def zeta_sc(v):
            return np.exp(-v)

        a_mult = b_mult = z_mult = None
    else:
        def alpha_fn(v):
            return inv_q * (c_phi * v) ** 3

        def beta_fn(v):
            return inv_q * v ** m

        a_mult = 3
        b_mult = m_int
        if model.form == "small_porosity":
            def zeta_sc(v):
                return np.ones_like(v)

            z_mult = 0
        else:
            def zeta_sc(v):
                return 1.0 - v

            z_mult = 1

    A = ComposedField(phi, alpha_fn, a_mult)
    B = ComposedField(phi, beta_fn, b_mult)
    zeta = [ComposedField(phi, lambda v, fi=fi: zeta_sc(v) * fi, z_mult)
            for fi in f]
    return FrozenCoefficients(A, B, zeta, u_bar, u0, model.sigma,
                              linearization, viscous=model.viscous)


def _reaction_factors(coeffs: FrozenCoefficients, ub_vals):
    """Pointwise (lin, shift) with c = B*lin and g1 = -B*shift.

    quasilinear:  reaction = B u / sigma(u_bar)
    gauss_newton: adds the derivative correction, shifting part of it to
    the right-hand side.
    """
    sig = coeffs.sigma
    if sig.constant:
        lin = 1.0 / sig.c0
        return lin, 0.0
    sb = eval_sigma(sig, ub_vals)
    if coeffs.linearization == "quasilinear":
        return 1.0 / sb, 0.0
    sp = eval_sigma_prime(sig, ub_vals)
    lin = 1.0 / sb - ub_vals * sp / sb**2
    shift = ub_vals**2 * sp / sb**2
    return lin, shift


# ---------------------------------------------------------------------------
# degree bookkeeping for quadrature sizing


def _deg_add(a, b):
    if a is None or b is None:
        return None
    return tuple(x + y for x, y in zip(a, b))


def _counts(cands, n_axes, smooth_n):
    """Per-axis Gauss counts integrating squares of the candidate terms."""
    ns = []
    for ax in range(n_axes):
        best = 0
        smooth = False
        for c in cands:
            if c is None:
                smooth = True
            else:
                best = max(best, c[ax])
        n = best + 1
        if smooth:
            n = max(n, smooth_n)
        ns.append(min(n, 24))
    return ns


class _CoefSplit:
    """Shared common-piece walk over the coefficient fields of a cell."""

    def __init__(self, coeffs: FrozenCoefficients, extra_fields=()):
        self.coeffs = coeffs
        d = coeffs.d
        self.fields = [coeffs.A, coeffs.B] + list(coeffs.zeta)
        self.i_ubar = None
        if coeffs.needs_u_bar():
            self.i_ubar = len(self.fields)
            self.fields.append(coeffs.u_bar)
        self.i_s1 = None
        if coeffs.source1 is not None:
            self.i_s1 = len(self.fields)
            self.fields.append(coeffs.source1)
        self.i_s2 = None
        if coeffs.source2 is not None:
            self.i_s2 = len(self.fields)
            self.fields.extend(coeffs.source2)
        self.n_coef = len(self.fields)
        self.fields.extend(extra_fields)
        self.d = d

    def walk(self, box):
        return common_pieces(box, self.fields)

    def coefficient_values(self, pieces, pts):
        """A, c, g1, g2 values at pts from the per-field pieces."""
        co = self.coeffs
        A_v = pieces[0].eval(pts)
        B_v = pieces[1].eval(pts)
        zeta_v = [pieces[2 + i].eval(pts) for i in range(self.d)]
        ub_v = None
        if self.i_ubar is not None:
            ub_v = pieces[self.i_ubar].eval(pts)
        lin, shift = _reaction_factors(co, ub_v)
        c_v = B_v * lin
        g1_v = -B_v * shift if np.ndim(shift) or shift else np.zeros(len(pts))
        if self.i_s1 is not None:
            g1_v = g1_v + pieces[self.i_s1].eval(pts)
        g2_v = [-A_v * zeta_v[i] for i in range(self.d)]
        if self.i_s2 is not None:
            for i in range(self.d):
                g2_v[i] = g2_v[i] + pieces[self.i_s2 + i].eval(pts)
        return A_v, c_v, g1_v, g2_v

    def degree_candidates(self, pieces, u_degs, w_degs):
        """Worst per-axis degrees of the residual-block factors."""
        co = self.coeffs
        degA = pieces[0].degs
        degB = pieces[1].degs
        deg_zeta = [pieces[2 + i].degs for i in range(self.d)]
        if co.sigma.constant:
            deg_c = degB
            deg_g1 = (0,) * (self.d + 1)
        else:
            deg_c = None
            deg_g1 = None if co.linearization == "gauss_newton" else (0,) * (self.d + 1)
        if self.i_s1 is not None:
            deg_g1 = None if deg_g1 is None else _deg_add(
                deg_g1, pieces[self.i_s1].degs) if pieces[self.i_s1].degs is None \
                else tuple(max(a, b) for a, b in zip(deg_g1, pieces[self.i_s1].degs))
        cands = [_deg_add(deg_c, u_degs), deg_g1]
        cands.extend(w_degs)
        for i in range(self.d):
            cands.append(_deg_add(degA, u_degs))
            cands.append(_deg_add(degA, deg_zeta[i]))
            cands.append(w_degs[i])
            if self.i_s2 is not None:
                cands.append(pieces[self.i_s2 + i].degs)
        return cands


# ---------------------------------------------------------------------------
# spaces, assembly, algebraic solve


@dataclass
class _Spaces:
    u: object
    w: list
    offsets: list
    n_total: int

    def to_fields(self, x):
        u = self.u.to_field(x[: self.u.n_dofs])
        ws = []
        for off, sw in zip(self.offsets, self.w):
            ws.append(sw.to_field(x[off: off + sw.n_dofs]))
        return u, ws


def _build_spaces(mesh, config: LsqSpaceConfig, boundary) -> _Spaces:
    d = mesh.d
    dir_parts = [(ax - 1, side) for ax, side in boundary.dirichlet]
    neu_parts = [(ax - 1, side) for ax, side in boundary.neumann(d)]
    su = pressure_space(mesh, config, dir_parts)
    sw = [flux_space(mesh, config, i, neu_parts) for i in range(d)]
    offsets = []
    off = su.n_dofs
    for s in sw:
        offsets.append(off)
        off += s.n_dofs
    return _Spaces(su, sw, offsets, off)


def _assemble(coeffs: FrozenCoefficients, spaces: _Spaces, smooth_n: int):
    mesh = spaces.u.mesh
    bounds = mesh.cylinder.bounds
    n_axes = mesh.d + 1
    u_degs = tuple(spaces.u.degrees)
    w_degs = [tuple(s.degrees) for s in spaces.w]
    split = _CoefSplit(coeffs)

    n = spaces.n_total
    b = np.zeros(n)
    H = sparse.csr_matrix((n, n))
    rows_acc, cols_acc, vals_acc = [], [], []
    pending = 0

    for ci, leaf in enumerate(mesh.leaves):
        box = mesh.rel_box(leaf)
        lo, hi = mesh.abs_box(leaf)
        ucols = spaces.u.cell_cols[ci]
        uC = spaces.u.cell_C[ci]
        wcols = [s.cell_cols[ci] for s in spaces.w]
        wC = [s.cell_C[ci] for s in spaces.w]
        ncu = len(ucols)
        ncw = [len(c) for c in wcols]
        nc = ncu + sum(ncw)
        wslice = []
        start = ncu
        for k in ncw:
            wslice.append(slice(start, start + k))
            start += k
        loc_cols = np.concatenate(
            [ucols] + [c + off for c, off in zip(wcols, spaces.offsets)])
        Hloc = np.zeros((nc, nc))
        bloc = np.zeros(nc)

        for sub, pieces in split.walk(box):
            cands = split.degree_candidates(pieces, u_degs, w_degs)
            ns = _counts(cands, n_axes, smooth_n)
            pts, wq = _piece_rule(bounds, sub, ns)
            A_v, c_v, g1_v, g2_v = split.coefficient_values(pieces, pts)
            if np.any(A_v <= 0):
                raise ValueError("diffusivity must stay positive on the slice")
            s = (pts - lo) / (hi - lo)
            tabN = spaces.u.tables(ci, s) @ uC
            tabNd = [spaces.u.tables(ci, s, 1 + i) @ uC
                     for i in range(coeffs.d)]
            tabM = [spaces.w[i].tables(ci, s) @ wC[i] for i in range(coeffs.d)]
            tabMdiv = [spaces.w[i].tables(ci, s, 1 + i) @ wC[i]
                       for i in range(coeffs.d)]

            R1 = np.zeros((len(pts), nc))
            if coeffs.viscous:
                R1[:, :ncu] = c_v[:, None] * tabN
            else:
                tabNt = spaces.u.tables(ci, s, 0) @ uC
                R1[:, :ncu] = tabNt + c_v[:, None] * tabN
            for i in range(coeffs.d):
                R1[:, wslice[i]] = tabMdiv[i]
            Hloc += R1.T @ (wq[:, None] * R1)
            bloc += R1.T @ (wq * g1_v)

            for i in range(coeffs.d):
                R2 = np.zeros((len(pts), nc))
                R2[:, :ncu] = A_v[:, None] * tabNd[i]
                R2[:, wslice[i]] = tabM[i]
                Hloc += R2.T @ (wq[:, None] * R2)
                bloc += R2.T @ (wq * g2_v[i])

        if not coeffs.viscous and box[0][0] == 0:
            _assemble_trace(coeffs, spaces, ci, box, Hloc, bloc, ncu, smooth_n)

        ii = np.repeat(loc_cols, nc)
        jj = np.tile(loc_cols, nc)
        rows_acc.append(ii)
        cols_acc.append(jj)
        vals_acc.append(Hloc.ravel())
        pending += nc * nc
        np.add.at(b, loc_cols, bloc)
        if pending > 2_000_000:
            H = H + sparse.coo_matrix(
                (np.concatenate(vals_acc),
                 (np.concatenate(rows_acc), np.concatenate(cols_acc))),
                shape=(n, n)).tocsr()
            rows_acc, cols_acc, vals_acc = [], [], []
            pending = 0

    if pending:
        H = H + sparse.coo_matrix(
            (np.concatenate(vals_acc),
             (np.concatenate(rows_acc), np.concatenate(cols_acc))),
            shape=(n, n)).tocsr()
    return H, b


def _assemble_trace(coeffs, spaces, ci, box, Hloc, bloc, ncu, smooth_n):
    """Initial-trace term of a bottom cell: integral of (u(t0,.) - u0)^2."""
    su = spaces.u
    mesh = su.mesh
    bounds_x = mesh.cylinder.bounds[1:]
    uC = su.cell_C[ci]
    lo, hi = mesh.abs_box(mesh.leaves[ci])
    p = max(su.degrees[1:])
    for piece in coeffs.u0.pieces_in(box[1:]):
        cands = [piece.degs, (p,) * len(bounds_x)]
        ns = _counts(cands, len(bounds_x), smooth_n)
        pts_x, wx = _piece_rule(bounds_x, piece.box, ns)
        u0_v = piece.eval(pts_x)
        s = np.column_stack(
            [np.zeros(len(pts_x))]
            + [(pts_x[:, a] - lo[1 + a]) / (hi[1 + a] - lo[1 + a])
               for a in range(len(bounds_x))])
        tabN0 = su.tables(ci, s) @ uC
        Hloc[:ncu, :ncu] += tabN0.T @ (wx[:, None] * tabN0)
        bloc[:ncu] += tabN0.T @ (wx * u0_v)


def _solve_spd(H, b, direct_limit: int):
    n = H.shape[0]
    if n == 0:
        return np.zeros(0), 0.0
    Hc = H.tocsc()
    b_scale = float(np.linalg.norm(b))
    if n <= direct_limit:
        try:
            lu = spla.splu(Hc)
        except RuntimeError as exc:
            raise ValueError(
                "singular normal equations; coefficient positivity or "
                "boundary conditions are inconsistent") from exc
        x = lu.solve(b)
        x += lu.solve(b - Hc @ x)
    else:
        diag = Hc.diagonal()
        M = sparse.diags(np.where(diag > 0, 1.0 / np.maximum(diag, 1e-300), 1.0))
        try:
            x, info = spla.cg(Hc, b, rtol=1e-12, atol=0.0, M=M,
                              maxiter=50 * int(np.sqrt(n) + 100))
        except TypeError:
            x, info = spla.cg(Hc, b, tol=1e-12, atol=0.0, M=M,
                              maxiter=50 * int(np.sqrt(n) + 100))
        if info != 0:
            lu = spla.splu(Hc)
            x = lu.solve(b)
            x += lu.solve(b - Hc @ x)
    defect = float(np.linalg.norm(b - Hc @ x)) / max(b_scale, 1e-300)
    return x, defect


# ---------------------------------------------------------------------------
# residual evaluation on fields


def residual_of(coeffs: FrozenCoefficients, u, w_list, mesh,
                smooth_n: int = 10):
    """Exact per-cell squared residuals of a discrete pair.

    Returns (cell_res2, trace_res2, mark2): mark2 adds each bottom cell's
    share of the initial-trace misfit to its entry, for marking; the
    reported total keeps the trace term separate.
    """
    bounds = mesh.cylinder.bounds
    n_axes = mesh.d + 1
    d = mesh.d
    du = [axis_derivative(u, 1 + i) for i in range(d)]
    divw = [axis_derivative(w_list[i], 1 + i) for i in range(d)]
    extra = [u] + du + list(w_list) + divw
    if not coeffs.viscous:
        extra.append(axis_derivative(u, 0))
    split = _CoefSplit(coeffs, extra_fields=extra)
    nb = split.n_coef

    cell_res2 = np.zeros(len(mesh.leaves))
    mark2 = np.zeros(len(mesh.leaves))
    for ci, leaf in enumerate(mesh.leaves):
        box = mesh.rel_box(leaf)
        acc = 0.0
        for sub, pieces in split.walk(box):
            u_p = pieces[nb]
            du_p = pieces[nb + 1: nb + 1 + d]
            w_p = pieces[nb + 1 + d: nb + 1 + 2 * d]
            divw_p = pieces[nb + 1 + 2 * d: nb + 1 + 3 * d]
            u_degs = u_p.degs
            w_degs = [p.degs for p in w_p]
            cands = split.degree_candidates(pieces, u_degs, w_degs)
            ns = _counts(cands, n_axes, smooth_n)
            pts, wq = _piece_rule(bounds, sub, ns)
            A_v, c_v, g1_v, g2_v = split.coefficient_values(pieces, pts)
            u_v = u_p.eval(pts)
            r1 = c_v * u_v - g1_v
            for i in range(d):
                r1 = r1 + divw_p[i].eval(pts)
            if not coeffs.viscous:
                r1 = r1 + pieces[nb + 1 + 3 * d].eval(pts)
            acc += float(wq @ r1**2)
            for i in range(d):
                r2 = w_p[i].eval(pts) + A_v * du_p[i].eval(pts) - g2_v[i]
                acc += float(wq @ r2**2)
        cell_res2[ci] = acc
        mark2[ci] = acc

    trace_res2 = 0.0
    if not coeffs.viscous:
        t0 = bounds[0][0]
        tr = trace_at(u, t0)
        terms = [(1.0, tr), (-1.0, coeffs.u0)]
        for ci, leaf in enumerate(mesh.leaves):
            box = mesh.rel_box(leaf)
            if box[0][0] != 0:
                continue
            local = norm2_box(bounds[1:], box[1:], terms, smooth_n)
            trace_res2 += local
            mark2[ci] += local
    return cell_res2, trace_res2, mark2


@dataclass
class LsqState:
    """Solved pressure/flux pair with its residual bookkeeping."""

    u: object
    w: list
    mesh: object
    cell_res2: np.ndarray
    trace_res2: float
    total_res: float
    dofs: int
    defect: float
    coeffs: FrozenCoefficients
    history: list = field(default_factory=list)

    @property
    def leaves(self):
        return len(self.mesh.leaves)


@dataclass
class SolveOptions:
    """Knobs of a single linear least-squares solve."""

    config: LsqSpaceConfig = field(default_factory=LsqSpaceConfig)
    max_refine: int = 25
    max_dofs: int = 5_000_000
    dorfler: float = 0.5
    smooth_n: int = 10
    direct_limit: int = 300_000


def _dorfler_mark(mesh, mark2, theta):
    order = np.argsort(-mark2, kind="stable")
    total = float(np.sum(mark2))
    if total <= 0:
        return [mesh.leaves[0]]
    acc = 0.0
    chosen = []
    for idx in order:
        chosen.append(mesh.leaves[int(idx)])
        acc += float(mark2[int(idx)])
        if acc >= theta * total:
            break
    return chosen


def solve_once(coeffs: FrozenCoefficients, mesh, boundary=None,
               options: SolveOptions | None = None):
    """One Galerkin solve on a fixed mesh; returns (state, marking values)."""
    opts = options or SolveOptions()
    from .model import BoundarySpec
    if boundary is None:
        boundary = BoundarySpec.all_dirichlet(mesh.d)
    spaces = _build_spaces(mesh, opts.config, boundary)
    H, b = _assemble(coeffs, spaces, opts.smooth_n)
    x, defect = _solve_spd(H, b, opts.direct_limit)
    u, ws = spaces.to_fields(x)
    cell_res2, trace_res2, mark2 = residual_of(
        coeffs, u, ws, mesh, opts.smooth_n)
    total = float(np.sqrt(np.sum(cell_res2) + trace_res2))
    state = LsqState(u, ws, mesh, cell_res2, trace_res2, total,
                     spaces.n_total, defect, coeffs)
    return state, mark2


def solve_linear_lsq(coeffs: FrozenCoefficients, mesh0, tol_lsq: float,
                     boundary=None, options: SolveOptions | None = None) -> LsqState:
    """Adaptive solve of the frozen-coefficient system to tolerance.

    Refines the mesh by Doerfler marking on per-cell squared residuals
    until the residual norm drops below tol_lsq; raises BudgetError (with
    the best state attached) when the refinement budget runs out.
    """
    if tol_lsq <= 0:
        raise ValueError("tol_lsq must be positive")
    opts = options or SolveOptions()
    mesh = mesh0
    best = None
    history = []
    for it in range(opts.max_refine + 1):
        state, mark2 = solve_once(coeffs, mesh, boundary, opts)
        history.append((state.dofs, state.total_res))
        state.history = list(history)
        if best is None or state.total_res <= best.total_res:
            best = state
        if state.total_res <= tol_lsq:
            return state
        if it >= opts.max_refine:
            raise BudgetError(
                f"refinement budget exhausted at residual {best.total_res:.3e} "
                f"(target {tol_lsq:.3e})", state=best)
        if state.dofs >= opts.max_dofs:
            raise BudgetError(
                f"dof budget exhausted at residual {best.total_res:.3e} "
                f"(target {tol_lsq:.3e})", state=best)
        mesh = mesh.refine(_dorfler_mark(mesh, mark2, opts.dorfler))
    raise BudgetError("unreachable", state=best)


def solve_viscous(coeffs: FrozenCoefficients, mesh0, tol: float,
                  boundary=None, options: SolveOptions | None = None) -> LsqState:
    """Instantaneous-pressure solve; same loop, no time-derivative block."""
    if not coeffs.viscous:
        raise ValueError("solve_viscous needs viscous coefficients")
    return solve_linear_lsq(coeffs, mesh0, tol, boundary, options)


def nonlinear_residual(state: LsqState, smooth_n: int = 10) -> float:
    """Residual with the reaction term taken at the solved pressure.

    For constant sigma this equals the linear residual exactly.
    """
    co = state.coeffs.relinearized(state.u)
    cell_res2, trace_res2, _ = residual_of(co, state.u, state.w, state.mesh,
                                           smooth_n)
    return float(np.sqrt(np.sum(cell_res2) + trace_res2))


def apply_G(coeffs: FrozenCoefficients, u, w_list, cell, n_pts: int = 4,
            include_rhs: bool = True):
    """Residual blocks sampled at tensor Gauss nodes of one absolute cell.

    Returns (pts, weights, blocks) with blocks["parabolic"], a list
    blocks["flux"], and blocks["trace"] = (pts_x, wx, values) when the
    cell touches the slice start.  include_rhs=False evaluates the bare
    operator instead of the residual.
    """
    from .quadrature import quadrature

    cell = [(float(a), float(b)) for a, b in cell]
    pts, wq = quadrature(cell, n_pts)
    d = len(cell) - 1
    ub_v = coeffs.u_bar.eval_abs(pts) if coeffs.needs_u_bar() else None
    lin, shift = _reaction_factors(coeffs, ub_v)
    B_v = coeffs.B.eval_abs(pts)
    A_v = coeffs.A.eval_abs(pts)
    u_v = u.eval_abs(pts)
    r1 = B_v * lin * u_v + B_v * shift
    if not coeffs.viscous:
        r1 = r1 + axis_derivative(u, 0).eval_abs(pts)
    for i in range(d):
        r1 = r1 + axis_derivative(w_list[i], 1 + i).eval_abs(pts)
    if include_rhs and coeffs.source1 is not None:
        r1 = r1 - coeffs.source1.eval_abs(pts)
    blocks = {"parabolic": r1, "flux": []}
    for i in range(d):
        r2 = w_list[i].eval_abs(pts) + A_v * axis_derivative(u, 1 + i).eval_abs(pts)
        if include_rhs:
            r2 = r2 + A_v * coeffs.zeta[i].eval_abs(pts)
            if coeffs.source2 is not None:
                r2 = r2 - coeffs.source2[i].eval_abs(pts)
        blocks["flux"].append(r2)
    blocks["trace"] = None
    if not coeffs.viscous and cell[0][0] == u.bounds[0][0]:
        from .quadrature import quadrature as quad_x

        pts_x, wx = quad_x(cell[1:], n_pts)
        tr = trace_at(u, cell[0][0])
        vals = tr.eval_abs(pts_x)
        if include_rhs and coeffs.u0 is not None:
            vals = vals - coeffs.u0.eval_abs(pts_x)
        blocks["trace"] = (pts_x, wx, vals)
    return pts, wq, blocks


# ---------------------------------------------------------------------------
# norms and the Picard iteration


def _sum_same_backend(fields):
    """Exact sum of Legendre fields sharing one partition backend."""
    base = fields[0]
    coeffs = []
    for i in range(base.backend.n_cells()):
        shape = tuple(max(f.coeffs[i].shape[a] for f in fields)
                      for a in range(base.n_axes))
        acc = np.zeros(shape)
        for f in fields:
            c = f.coeffs[i]
            acc[tuple(slice(0, n) for n in c.shape)] += c
        coeffs.append(acc)
    return type(base)(base.bounds, base.backend, coeffs)


def pair_norm_U(u, w_list, viscous: bool = False) -> float:
    """Graph norm of the pair used for the relative error indicators."""
    d = len(w_list)
    total = u.norm2() + sum(w.norm2() for w in w_list)
    div_parts = [axis_derivative(w_list[i], 1 + i) for i in range(d)]
    if viscous:
        total += _sum_same_backend(div_parts).norm2()
    else:
        total += sum(axis_derivative(u, 1 + i).norm2() for i in range(d))
        total += _sum_same_backend(
            [axis_derivative(u, 0)] + div_parts).norm2()
        tr = trace_at(u, u.bounds[0][0])
        total += sum(float(np.sum(c**2)) for _, (_, c) in tr.entries)
    return float(np.sqrt(total))


def constant_continuation(u0, t_bounds):
    """Initial pressure iterate: u0 extended constantly in time."""
    return TimeConstant(u0, t_bounds)


def picard_u(model: ModelSpec, phi, u0, mesh0, tol_u: float,
             tol_lsq: float | None = None, *, rho_u: float | None = None,
             lambda_phi: float | None = None, lambda_update: bool = False,
             warmup: int = 2, linearization: str = "quasilinear",
             boundary=None, options: SolveOptions | None = None,
             u_init=None, outer_k: int = 0):
    """Inner fixed-point iteration for the pressure at frozen porosity.

    Fixed-tolerance mode passes tol_lsq directly; adaptive mode (tol_lsq
    None) derives it each pass from rho_u * (1 - lambda_phi) * res_u.
    Returns (state, info) where info carries the res_u history, the
    (possibly updated) lambda_phi, and iteration-log rows.
    """
    if tol_u <= 0:
        raise ValueError("tol_u must be positive")
    adaptive = tol_lsq is None
    if adaptive and (rho_u is None or lambda_phi is None):
        raise ValueError("adaptive mode needs rho_u and lambda_phi")
    if not adaptive and tol_lsq > tol_u:
        raise ValueError("tol_lsq must not exceed tol_u")
    if boundary is None:
        boundary = model.boundary
    for ax, side in boundary.neumann(model.d):
        if model.f[ax - 1] != 0:
            raise ValueError(
                "zero-flux faces must be orthogonal to the buoyancy "
                "direction; inhomogeneous flux data is not supported")
    cyl = mesh0.cylinder
    if u_init is None:
        if u0 is not None:
            u_init = constant_continuation(u0, (cyl.t0, cyl.t1))
        else:
            zero = SpatialData.constant(cyl.bounds[1:], 0.0)
            u_init = constant_continuation(zero, (cyl.t0, cyl.t1))

    u_bar = u_init
    mesh = mesh0
    res_u = tol_u + 1.0
    history = []
    rows = []
    state = None
    ell = 0
    cur_tol = None
    while res_u > tol_u:
        cur_tol = rho_u * (1.0 - lambda_phi) * res_u if adaptive else tol_lsq
        coeffs = frozen_coefficients(model, phi, u_bar, u0, linearization)
        state = solve_linear_lsq(coeffs, mesh, cur_tol, boundary, options)
        res_u = nonlinear_residual(state,
                                   (options or SolveOptions()).smooth_n)
        history.append(res_u)
        rows.append({"outer_k": outer_k, "inner_l": ell, "res_u": res_u,
                     "dofs": state.dofs, "leaves": state.leaves})
        if len(history) >= 4:
            ratios = [history[i] / history[i - 1]
                      for i in range(len(history) - 3, len(history))]
            if all(r >= 1.0 for r in ratios):
                raise NonContractionError(
                    "pressure iteration stopped contracting; shorten the "
                    "time slice", state=state, history=history)
        if lambda_update and ell >= warmup and len(history) >= 2:
            lambda_phi = min(lambda_phi, history[-1] / history[-2])
        u_bar = state.u
        mesh = state.mesh
        ell += 1
    info = {"history": history, "lambda_phi": lambda_phi, "rows": rows,
            "iterations": ell, "tol_lsq_last": cur_tol}
    return state, info
