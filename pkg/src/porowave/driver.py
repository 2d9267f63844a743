"""Outer fixed-point orchestration for the coupled porosity-pressure solve.

Two variants of the same outer loop: the full method runs with a fixed
tolerance stack, the fully adaptive method derives the pressure and
projection tolerances each outer iteration from the current porosity
residual and estimated contraction factors.  Both alternate an inner
pressure iteration at frozen porosity with one inexact porosity update.
Time slicing runs either variant per slice and hands terminal traces
forward as initial data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .fields import SpatialData, TimeConstant, trace_field
from .lsq import (BudgetError, LsqState, NonContractionError, SolveOptions,
                  frozen_coefficients, pair_norm_U, picard_u, residual_of)
from .mesh import Cylinder, uniform_mesh
from .model import ModelSpec, estimate_lipschitz_kappa
from .porosity import porosity_step, tnorm, tnorm_diff


@dataclass
class ToleranceSet:
    """Stopping tolerances and contraction parameters for the outer loop.

    The adaptive method derives tol_u, tol_proj and tol_lsq itself, so
    those may stay None there; the fixed-tolerance method requires them.
    tol_int defaults to 1e-2 * tol_proj, c_L to a sampled Lipschitz
    constant of kappa over a padded initial-pressure range.
    """

    tol_phi: float
    tol_proj: float | None = None
    tol_int: float | None = None
    tol_u: float | None = None
    tol_lsq: float | None = None
    theta: float = 0.5
    rho_phi: float = 0.5
    rho_u: float = 0.2
    lambda_Theta_init: float = 0.6
    lambda_Phi_init: float = 0.6
    c_L: float | None = None
    lipschitz_update_enabled: bool = False
    warmup_iterations: int = 2
    thm_constant: float = 1.0

    def __post_init__(self):
        for name in ("tol_phi", "tol_proj", "tol_int", "tol_u", "tol_lsq"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("theta", "rho_phi", "rho_u", "lambda_Theta_init",
                     "lambda_Phi_init"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.tol_u is not None and self.tol_lsq is not None \
                and self.tol_lsq > self.tol_u:
            raise ValueError("tol_lsq must not exceed tol_u")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be nonnegative")


@dataclass
class OuterRecord:
    """Everything one outer iteration produced, for logs and indicators."""

    k: int
    res_u: float
    inner_iterations: int
    pressure: LsqState
    phi: object
    diff_T: float
    phi_norm_T: float
    res_phi: float
    tol_u: float
    tol_proj: float
    tol_lsq: float
    lambda_Theta: float
    lambda_Phi: float
    dofs_u: int
    dofs_phi: int


@dataclass
class RunResult:
    model: ModelSpec
    phi: object
    state: LsqState
    records: list
    rows: list
    phi0: SpatialData
    u0: SpatialData | None
    linearization: str
    m: int
    tolerances: ToleranceSet

    @property
    def outer_iterations(self) -> int:
        return len(self.records)


def _phi_dofs(phi) -> int:
    return sum(c.size for c in phi.coeffs)


def _check_outer_contraction(diffs) -> None:
    if len(diffs) >= 3:
        r1 = diffs[-1] / diffs[-2]
        r2 = diffs[-2] / diffs[-3]
        if r1 >= 1.0 and r2 >= 1.0:
            raise NonContractionError(
                "porosity iteration stopped contracting; the time slice is "
                "too long", state=None, history=list(diffs))


def full_method(model: ModelSpec, phi0: SpatialData, u0: SpatialData | None,
                tols: ToleranceSet, mesh0, *,
                linearization: str = "quasilinear", m: int = 3,
                options: SolveOptions | None = None,
                max_outer: int = 60) -> RunResult:
    """Fixed-tolerance outer loop.

    Starts from the degenerate iterate phi(t, x) = phi0(x), alternates the
    inner pressure iteration (to tol_u, each linear solve to tol_lsq) with
    one porosity update (to tol_proj / tol_int), and stops when the T-norm
    step length drops below tol_phi.
    """
    if tols.tol_proj is None or tols.tol_u is None or tols.tol_lsq is None:
        raise ValueError(
            "fixed-tolerance run needs tol_proj, tol_u and tol_lsq")
    tol_int = tols.tol_int if tols.tol_int is not None \
        else 1e-2 * tols.tol_proj
    if not model.viscous and u0 is None:
        u0 = SpatialData.constant(mesh0.cylinder.bounds[1:], 0.0)

    t_bounds = mesh0.cylinder.bounds[0]
    phi = TimeConstant(phi0, t_bounds)
    records: list = []
    rows: list = []
    diffs: list = []
    res_phi = tols.tol_phi + 1.0
    pressure_mesh = mesh0
    proj_mesh = None
    k = 0
    while res_phi > tols.tol_phi:
        if k >= max_outer:
            raise BudgetError(
                f"outer iteration budget exhausted at res_phi "
                f"{res_phi:.3e} (target {tols.tol_phi:.3e})", state=None)
        state, info = picard_u(
            model, phi, u0, pressure_mesh, tols.tol_u, tols.tol_lsq,
            linearization=linearization, options=options, outer_k=k)
        rows.extend(info["rows"])
        step = porosity_step(model, phi, state, phi0, u0, tols.tol_proj,
                             tol_int, m, proj_mesh0=proj_mesh)
        diff = tnorm_diff(step.phi, phi)
        res_phi = diff
        diffs.append(diff)
        records.append(OuterRecord(
            k=k, res_u=info["history"][-1],
            inner_iterations=info["iterations"], pressure=state,
            phi=step.phi, diff_T=diff, phi_norm_T=tnorm(step.phi),
            res_phi=res_phi, tol_u=tols.tol_u, tol_proj=tols.tol_proj,
            tol_lsq=tols.tol_lsq, lambda_Theta=tols.lambda_Theta_init,
            lambda_Phi=tols.lambda_Phi_init, dofs_u=state.dofs,
            dofs_phi=_phi_dofs(step.phi)))
        _check_outer_contraction(diffs)
        phi = step.phi
        pressure_mesh = state.mesh
        proj_mesh = step.mesh
        k += 1
    return RunResult(model, phi, records[-1].pressure, records, rows, phi0,
                     u0, linearization, m, tols)


def adaptive_tolerances(res_phi: float, lambda_Theta: float, rho_phi: float,
                        theta: float, Q: float, T_slice: float,
                        c_L: float) -> tuple[float, float]:
    """Pressure and projection tolerances derived from the phi residual.

    tol_u  = theta * (1 / (Q + T c_L)) * rho_phi * (1 - lambda_Theta) * res
    tol_proj = (1 - theta) * rho_phi * (1 - lambda_Theta) * res
    """
    base = rho_phi * (1.0 - lambda_Theta) * res_phi
    tol_u = theta * base / (Q + T_slice * c_L)
    tol_proj = (1.0 - theta) * base
    return tol_u, tol_proj


def update_lipschitz(lambda_init: float, res_new: float,
                     res_old: float) -> float:
    """min of the initial guess and the latest residual ratio."""
    if res_old <= 0:
        raise ValueError("res_old must be positive")
    return min(lambda_init, res_new / res_old)


def estimate_c_L(model: ModelSpec, u_range=None, pad: float = 0.2) -> float:
    """Lipschitz constant of kappa, global or restricted to a value range.

    Without a range this is the supremum of |kappa'| over the whole line:
    kappa' tends to 1/sigma(-inf) and 1/sigma(+inf) at the tails and its
    transition peak sits within a few multiples of the steepness scale
    c2, so sampling a wide window and folding in the tail limits captures
    it.  With ``u_range = (lo, hi)`` the sample is taken over that
    interval padded by ``pad`` times its width on both sides; a
    degenerate range collapses to the pointwise |kappa'|.
    """
    spec = model.sigma
    if spec.constant:
        return 1.0 / spec.c0
    if u_range is None:
        w = max(1.0, 60.0 * spec.c2)
        peak = estimate_lipschitz_kappa(spec, (-w, w), n_samples=400001)
        tails = max(1.0 / spec.c0, 1.0 / (spec.c0 * (1.0 - 2.0 * spec.c1)))
        return max(peak, tails)
    lo, hi = float(u_range[0]), float(u_range[1])
    w = hi - lo
    return estimate_lipschitz_kappa(spec, (lo - pad * w, hi + pad * w))


def _value_range(data: SpatialData | None) -> tuple[float, float]:
    """Sampled value range of spatial data (pressure traces)."""
    if data is None or data.is_zero():
        return (0.0, 0.0)
    n = 513 if len(data.bounds) == 1 else 65
    axes = [np.linspace(a, b, n) for a, b in data.bounds]
    grids = np.meshgrid(*axes, indexing="ij")
    vals = data.eval_abs(np.stack([g.ravel() for g in grids], axis=-1))
    return (float(vals.min()), float(vals.max()))


def fully_adaptive_method(model: ModelSpec, phi0: SpatialData,
                          u0: SpatialData | None, tols: ToleranceSet, mesh0,
                          *, linearization: str = "quasilinear", m: int = 3,
                          options: SolveOptions | None = None,
                          max_outer: int = 60) -> RunResult:
    """Outer loop with tolerances chosen from the running residuals.

    Each outer iteration derives (tol_u, tol_proj) from the current
    res_phi, the inner loop derives tol_lsq from its own residual, and
    res_phi itself is reported scaled by lambda_Theta / (1 - lambda_Theta).
    Lipschitz updates, when enabled, clamp the factors by observed ratios
    after the warmup.
    """
    if not model.viscous and u0 is None:
        u0 = SpatialData.constant(mesh0.cylinder.bounds[1:], 0.0)
    cyl = mesh0.cylinder
    T_slice = cyl.t1 - cyl.t0
    # default c_L: Lipschitz constant of kappa over the incoming pressure
    # range (padded), not the far larger global supremum
    c_L = tols.c_L if tols.c_L is not None \
        else estimate_c_L(model, _value_range(u0))

    t_bounds = cyl.bounds[0]
    phi = TimeConstant(phi0, t_bounds)
    lam_T = tols.lambda_Theta_init
    lam_P = tols.lambda_Phi_init
    records: list = []
    rows: list = []
    diffs: list = []
    res_phi = tols.tol_phi + 1.0
    pressure_mesh = mesh0
    proj_mesh = None
    k = 0
    while res_phi > tols.tol_phi:
        if k >= max_outer:
            raise BudgetError(
                f"outer iteration budget exhausted at res_phi "
                f"{res_phi:.3e} (target {tols.tol_phi:.3e})", state=None)
        tol_u, tol_proj = adaptive_tolerances(
            res_phi, lam_T, tols.rho_phi, tols.theta, model.Q, T_slice, c_L)
        tol_int = tols.tol_int if tols.tol_int is not None \
            else 1e-2 * tol_proj
        state, info = picard_u(
            model, phi, u0, pressure_mesh, tol_u, None, rho_u=tols.rho_u,
            lambda_phi=lam_P, lambda_update=tols.lipschitz_update_enabled,
            warmup=tols.warmup_iterations, linearization=linearization,
            options=options, outer_k=k)
        lam_P = info["lambda_phi"]
        rows.extend(info["rows"])
        step = porosity_step(model, phi, state, phi0, u0, tol_proj, tol_int,
                             m, proj_mesh0=proj_mesh)
        diff = tnorm_diff(step.phi, phi)
        res_phi = lam_T / (1.0 - lam_T) * diff
        diffs.append(diff)
        records.append(OuterRecord(
            k=k, res_u=info["history"][-1],
            inner_iterations=info["iterations"], pressure=state,
            phi=step.phi, diff_T=diff, phi_norm_T=tnorm(step.phi),
            res_phi=res_phi, tol_u=tol_u, tol_proj=tol_proj,
            tol_lsq=info["tol_lsq_last"],
            lambda_Theta=lam_T, lambda_Phi=lam_P, dofs_u=state.dofs,
            dofs_phi=_phi_dofs(step.phi)))
        _check_outer_contraction(diffs)
        if tols.lipschitz_update_enabled and k >= tols.warmup_iterations \
                and len(diffs) >= 2:
            lam_T = update_lipschitz(tols.lambda_Theta_init, diffs[-1],
                                     diffs[-2])
        phi = step.phi
        pressure_mesh = state.mesh
        proj_mesh = step.mesh
        k += 1
    return RunResult(model, phi, records[-1].pressure, records, rows, phi0,
                     u0, linearization, m, replace(tols, c_L=c_L))


# ---------------------------------------------------------------------------
# time slicing


@dataclass
class SliceResult:
    index: int
    t_span: tuple[float, float]
    result: RunResult
    phi_trace: SpatialData
    u_trace: SpatialData | None


@dataclass
class SlicedRun:
    slices: list
    budget: list  # per-slice dicts with the accumulated error bounds

    @property
    def phi_fields(self):
        return [s.result.phi for s in self.slices]

    def final_phi_trace(self) -> SpatialData:
        return self.slices[-1].phi_trace


def _slice_budget(prev: dict | None, tols_used: dict, T_slice: float,
                  C: float) -> dict:
    """Worst-case error accumulation with all unknown constants set to 1.

    eps_phi' = eps_phi + eps_u + tol_phi
    eps_u'   = sqrt(T) tol_phi + eps_u + C tol_u
    """
    eps_phi = prev["eps_phi"] if prev else 0.0
    eps_u = prev["eps_u"] if prev else 0.0
    return {
        "eps_phi": eps_phi + eps_u + tols_used["tol_phi"],
        "eps_u": math.sqrt(T_slice) * tols_used["tol_phi"] + eps_u
        + C * tols_used["tol_u"],
    }


def run_sliced(model: ModelSpec, phi0: SpatialData, u0: SpatialData | None,
               tols: ToleranceSet, n_slices: int, grid, *,
               mode: str = "full", linearization: str = "quasilinear",
               m: int = 3, options: SolveOptions | None = None,
               max_outer: int = 60, max_halvings: int = 3) -> SlicedRun:
    """Sequential uniform time slices with exact trace hand-off.

    grid is (n_time, n_space_tuple) for the per-slice starting mesh.  A
    slice whose outer or inner iteration stops contracting is restarted
    as two half-length slices, up to max_halvings nested levels.
    """
    if n_slices < 1:
        raise ValueError("need at least one slice")
    if mode not in ("full", "adaptive"):
        raise ValueError(f"unknown mode {mode!r}")
    if not model.viscous and u0 is None:
        u0 = SpatialData.constant(model.domain, 0.0)

    h = model.T / n_slices
    slices: list = []
    budget: list = []
    phi_cur, u_cur = phi0, u0
    prev_budget = None
    for j in range(n_slices):
        t_a, t_b = j * h, (j + 1) * h
        results = _run_slice(model, phi_cur, u_cur, tols, t_a, t_b, grid,
                             mode, linearization, m, options, max_outer,
                             max_halvings)
        for res in results:
            idx = len(slices)
            phi_tr = trace_field(res.phi)
            u_tr = None if model.viscous else trace_field(res.state.u)
            span = (res.state.u.bounds[0][0], res.state.u.bounds[0][1])
            slices.append(SliceResult(idx, span, res, phi_tr, u_tr))
            last = res.records[-1]
            prev_budget = _slice_budget(
                prev_budget,
                {"tol_phi": tols.tol_phi, "tol_u": last.tol_u},
                span[1] - span[0], tols.thm_constant)
            budget.append({"slice": idx, **prev_budget})
            phi_cur, u_cur = phi_tr, u_tr
    return SlicedRun(slices, budget)


def _domain_corners(model: ModelSpec):
    lo = tuple(a for a, _ in model.domain)
    hi = tuple(b for _, b in model.domain)
    return lo, hi


def _run_slice(model, phi0, u0, tols, t_a, t_b, grid, mode, linearization,
               m, options, max_outer, halvings_left):
    lo, hi = _domain_corners(model)
    cyl = Cylinder(t_a, t_b, lo, hi)
    mesh0 = uniform_mesh(cyl, grid[0], tuple(grid[1]))
    method = full_method if mode == "full" else fully_adaptive_method
    try:
        res = method(model, phi0, u0, tols, mesh0,
                     linearization=linearization, m=m, options=options,
                     max_outer=max_outer)
        return [res]
    except NonContractionError:
        if halvings_left <= 0:
            raise
        mid = 0.5 * (t_a + t_b)
        left = _run_slice(model, phi0, u0, tols, t_a, mid, grid, mode,
                          linearization, m, options, max_outer,
                          halvings_left - 1)
        phi_mid = trace_field(left[-1].phi)
        u_mid = None if model.viscous else trace_field(left[-1].state.u)
        right = _run_slice(model, phi_mid, u_mid, tols, mid, t_b, grid, mode,
                           linearization, m, options, max_outer,
                           halvings_left - 1)
        return left + right


# ---------------------------------------------------------------------------
# indicators and audits


def relative_indicators(result: RunResult):
    """Per-outer-iteration relative error indicator series.

    rel_phi compares consecutive porosity iterates in the T-norm; rel_u
    is the nonlinear residual of each pressure pair recomputed with the
    final porosity frozen (the closest available coefficient), divided by
    the pair's graph norm.
    """
    rel_phi = [r.diff_T / r.phi_norm_T for r in result.records]
    rel_u = []
    for r in result.records:
        st = r.pressure
        co = frozen_coefficients(result.model, result.phi, st.u, result.u0,
                                 result.linearization)
        cell2, tr2, _ = residual_of(co, st.u, st.w, st.mesh)
        res = math.sqrt(float(np.sum(cell2)) + tr2)
        rel_u.append(res / pair_norm_U(st.u, st.w, result.model.viscous))
    return rel_phi, rel_u


def contraction_audit(result_or_records) -> dict:
    """Geometric mean of consecutive T-norm step ratios (empirical
    lambda_Theta) plus the raw ratio list; < 1 in every converged run."""
    records = getattr(result_or_records, "records", result_or_records)
    diffs = [r.diff_T for r in records]
    ratios = [b / a for a, b in zip(diffs, diffs[1:]) if a > 0]
    if not ratios:
        return {"ratios": [], "geomean": float("nan")}
    gm = float(np.exp(np.mean(np.log(ratios))))
    return {"ratios": ratios, "geomean": gm}


def audit_sliced(run: SlicedRun) -> dict:
    """Contraction audit pooled over all slices of a run."""
    ratios = []
    for s in run.slices:
        ratios.extend(contraction_audit(s.result)["ratios"])
    if not ratios:
        return {"ratios": [], "geomean": float("nan")}
    gm = float(np.exp(np.mean(np.log(ratios))))
    return {"ratios": ratios, "geomean": gm}
