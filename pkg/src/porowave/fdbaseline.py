"""Uniform-grid finite-difference reference solver (one space dimension).

A deliberately plain scheme for the porosity-pressure system, used to
compare error-per-dof against the adaptive solver: backward Euler for the
pressure with coefficients frozen at the current porosity state, centered
flux-form differences for the diffusion and buoyancy terms, and the
integral (mild) porosity update accumulated with the trapezoidal rule.
The reported grid keeps dt/dx constant across a refinement family;
intermediate substeps refine the march without changing the report grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from .model import ModelSpec, effective_coefficients, eval_kappa, eval_sigma

SCHEMES = ("ImplicitPressure_ExplicitPorosity",)


class FdInstabilityError(RuntimeError):
    """The march produced non-finite values; increase substeps."""


@dataclass(frozen=True)
class FdConfig:
    """Grid family parameters: nx cells, nt = nx * round(T / L) steps."""

    nx: int
    substeps: int = 1
    scheme: str = "ImplicitPressure_ExplicitPorosity"

    def __post_init__(self):
        if self.nx < 2:
            raise ValueError("need at least two spatial cells")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def nt_report(self, model: ModelSpec) -> int:
        (lo, hi), = model.domain
        return self.nx * max(1, round(model.T / (hi - lo)))


@dataclass
class FdResult:
    """Solution samples on the reported uniform space-time grid."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray      # shape (nt + 1, nx + 1)
    theta: np.ndarray  # porosity state, same shape
    config: FdConfig
    model: ModelSpec

    def dofs(self) -> int:
        return self.u.size + self.theta.size

    def sample_u(self, t_grid, x_grid) -> np.ndarray:
        return _resample(self.t, self.x, self.u, t_grid, x_grid)

    def sample_theta(self, t_grid, x_grid) -> np.ndarray:
        return _resample(self.t, self.x, self.theta, t_grid, x_grid)


def _resample(t, x, field, t_grid, x_grid) -> np.ndarray:
    interp = RegularGridInterpolator((t, x), field, method="linear",
                                     bounds_error=False, fill_value=None)
    tt, xx = np.meshgrid(t_grid, x_grid, indexing="ij")
    return interp(np.stack([tt.ravel(), xx.ravel()], axis=-1)).reshape(
        len(t_grid), len(x_grid))


def _nodal(data, x) -> np.ndarray:
    if data is None:
        return np.zeros_like(x)
    if np.isscalar(data):
        return np.full_like(x, float(data))
    if callable(data):
        return np.asarray(data(x), dtype=float)
    return np.asarray(data.eval_abs(x[:, None]), dtype=float)


def fd_solve(model: ModelSpec, phi0, u0, config: FdConfig, *,
             coeffs_fn=None) -> FdResult:
    """March the coupled system on a uniform grid.

    ``phi0`` and ``u0`` may be spatial data, callables on node
    coordinates, or scalars; ``coeffs_fn(theta) -> (alpha, beta, zeta)``
    replaces the model's coefficient functions (test hook).  Pressure
    boundary values are homogeneous Dirichlet at both ends.
    """
    if model.d != 1:
        raise ValueError("the reference solver is one-dimensional")
    if model.viscous:
        raise ValueError("the reference solver needs Q > 0")
    if coeffs_fn is None:
        def coeffs_fn(theta):
            return effective_coefficients(model, theta, validate=False)
    (lo, hi), = model.domain
    nx = config.nx
    x = np.linspace(lo, hi, nx + 1)
    dx = (hi - lo) / nx
    nt = config.nt_report(model)
    dt = model.T / (nt * config.substeps)
    f_scalar = model.f[0]
    Q = model.Q

    theta = _nodal(phi0, x).copy()
    u = _nodal(u0, x).copy()
    theta0 = theta.copy()
    u_init = u.copy()
    accum = np.zeros_like(x)

    t_report = np.linspace(0.0, model.T, nt + 1)
    U = np.empty((nt + 1, nx + 1))
    TH = np.empty((nt + 1, nx + 1))
    U[0], TH[0] = u, theta

    for n in range(nt):
        for _ in range(config.substeps):
            alpha, beta, zeta = coeffs_fn(theta)
            a_mid = 0.5 * (alpha[:-1] + alpha[1:])
            g_mid = a_mid * 0.5 * (zeta[:-1] + zeta[1:]) * f_scalar
            react = beta / eval_sigma(model.sigma, u)
            rate_old = beta * eval_kappa(model.sigma, u)

            # tridiagonal backward-Euler step for the interior nodes
            diag = Q / dt + (a_mid[:-1] + a_mid[1:]) / dx**2 + react[1:-1]
            lower = -a_mid[:-1] / dx**2
            upper = -a_mid[1:] / dx**2
            rhs = Q / dt * u[1:-1] + (g_mid[1:] - g_mid[:-1]) / dx
            ab = np.zeros((3, nx - 1))
            ab[0, 1:] = upper[:-1]
            ab[1] = diag
            ab[2, :-1] = lower[1:]
            u_new = np.zeros_like(u)
            u_new[1:-1] = solve_banded((1, 1), ab, rhs, check_finite=False)

            rate_new = beta * eval_kappa(model.sigma, u_new)
            accum += 0.5 * dt * (rate_old + rate_new)
            theta = theta0 + Q * (u_init - u_new) - accum
            u = u_new
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(theta))):
                raise FdInstabilityError(
                    f"non-finite values at report step {n + 1}; increase "
                    f"substeps (currently {config.substeps})")
        U[n + 1], TH[n + 1] = u, theta

    return FdResult(t=t_report, x=x, u=U, theta=TH, config=config,
                    model=model)


def grid_tnorm(values: np.ndarray, t_grid, x_grid) -> float:
    """Trapezoid-rule T-norm of grid samples: space-time L2 plus the
    final-time spatial trace."""
    inner = np.trapezoid(values**2, x_grid, axis=1)
    bulk = np.trapezoid(inner, t_grid)
    trace = np.trapezoid(values[-1] ** 2, x_grid)
    return float(np.sqrt(bulk + trace))


def compare_runs(entries, reference_values, t_grid, x_grid) -> list:
    """Error-vs-dofs table against a reference sampled on the same grid.

    ``entries`` is a sequence of (label, dofs, values) with values
    sampled on ``t_grid x x_grid``; errors are measured in the sampled
    T-norm.  An entry whose values are the reference itself reports 0.
    """
    ref = np.asarray(reference_values, dtype=float)
    rows = []
    for label, dofs, values in entries:
        err = grid_tnorm(np.asarray(values, dtype=float) - ref, t_grid,
                         x_grid)
        rows.append({"label": label, "dofs": int(dofs), "error": err})
    return rows


def convergence_rate(rows) -> float:
    """Least-squares slope of log error against log dofs (sign flipped,
    so a positive value is an error reduction rate)."""
    pts = [(r["dofs"], r["error"]) for r in rows if r["error"] > 0]
    if len(pts) < 2:
        raise ValueError("need at least two nonzero-error rows")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    slope = np.polyfit(lx, ly, 1)[0]
    return float(-slope)
