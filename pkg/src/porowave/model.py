"""Constitutive model for compaction-driven flow in a viscously deforming matrix.

The effective pressure u and porosity phi are coupled through three
porosity-dependent coefficients (mobility alpha, reaction weight beta,
buoyancy zeta) and a pressure-dependent bulk viscosity sigma.  Four model
forms are supported:

* ``full``            -- the two-way coupled system in the porosity variable,
* ``log_transformed`` -- same physics in the variable ``-log(1 - phi)``,
  which keeps porosity in (0, 1) by construction,
* ``small_porosity``  -- drops the (1 - phi) factors (classical small-phi
  asymptotics); can leave (0, 1),
* ``viscous_limit``   -- instantaneous pressure (Q = 0), no time derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FORMS = ("full", "log_transformed", "small_porosity", "viscous_limit")


@dataclass(frozen=True)
class SigmaSpec:
    """Bulk-viscosity law ``sigma(v) = c0 * (1 - c1 * (1 + tanh(-v / c2)))``.

    Monotonically increasing in v, with range ``[c0*(1-2*c1), c0]``.
    ``c1 = 0`` gives the constant law ``sigma == c0`` (no decompaction
    weakening); ``c1`` close to 1/2 with small ``c2`` gives a sharp
    viscosity drop under negative effective pressure.
    """

    c0: float = 1.0
    c1: float = 0.0
    c2: float = 1.0

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if not 0 <= self.c1 < 0.5:
            raise ValueError("c1 must lie in [0, 1/2)")
        if not self.c2 > 0:
            raise ValueError("c2 must be positive")

    @property
    def constant(self) -> bool:
        return self.c1 == 0

    @property
    def bounds(self) -> tuple[float, float]:
        return self.c0 * (1 - 2 * self.c1), self.c0


def eval_sigma(spec: SigmaSpec, v):
    """Evaluate sigma(v); accepts scalars or arrays."""
    v = np.asarray(v, dtype=float)
    return spec.c0 * (1 - spec.c1 * (1 + np.tanh(-v / spec.c2)))


def eval_sigma_prime(spec: SigmaSpec, v):
    """d(sigma)/dv; equals ``c0*c1/c2 * sech^2(v/c2)``."""
    x = np.abs(np.asarray(v, dtype=float) / spec.c2)
    sech = 2.0 * np.exp(-x) / (1.0 + np.exp(-2.0 * x))
    return spec.c0 * spec.c1 / spec.c2 * sech**2


def eval_kappa(spec: SigmaSpec, v):
    """kappa(v) = v / sigma(v), the reaction nonlinearity."""
    return np.asarray(v, dtype=float) / eval_sigma(spec, v)


def eval_kappa_prime(spec: SigmaSpec, v):
    s = eval_sigma(spec, v)
    return 1.0 / s - np.asarray(v, dtype=float) * eval_sigma_prime(spec, v) / s**2


def divided_difference_kappa(spec: SigmaSpec, a, b, rel_tol: float = 1e-9):
    """Stable divided difference ``(kappa(a) - kappa(b)) / (a - b)``.

    Falls back to the derivative where ``|a - b|`` is below ``rel_tol``
    relative to the magnitude of the arguments, so the result is continuous
    across the diagonal.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    close = np.abs(a - b) <= rel_tol * scale
    mid = 0.5 * (a + b)
    out = np.where(close, eval_kappa_prime(spec, mid), 0.0)
    denom = np.where(close, 1.0, a - b)
    num = eval_kappa(spec, a) - eval_kappa(spec, b)
    return np.where(close, out, num / denom)


def estimate_lipschitz_kappa(spec: SigmaSpec, v_range: tuple[float, float],
                             n_samples: int = 100001) -> float:
    """Sampled Lipschitz constant of kappa on the closed interval v_range.

    Returns ``max |kappa'(v)|`` over an equispaced sample including both
    endpoints, so the estimate is nondecreasing in n_samples (up to nesting)
    and converges to the true supremum.  For constant sigma the exact value
    1/c0 is returned for any range.
    """
    lo, hi = float(v_range[0]), float(v_range[1])
    if hi < lo:
        raise ValueError("empty range")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    if spec.constant:
        return 1.0 / spec.c0
    v = np.linspace(lo, hi, n_samples)
    return float(np.abs(eval_kappa_prime(spec, v)).max())


@dataclass(frozen=True)
class BoundarySpec:
    """Pressure boundary tags per spatial face.

    ``dirichlet`` holds (axis, side) pairs with axis in 1..d (axis 0 is
    time) and side 0 (lower) or 1 (upper).  Faces not listed are Neumann
    faces, where the normal flux component is constrained to zero instead.
    """

    dirichlet: frozenset = field(default_factory=frozenset)

    @staticmethod
    def all_dirichlet(d: int) -> "BoundarySpec":
        faces = frozenset((ax, side) for ax in range(1, d + 1) for side in (0, 1))
        return BoundarySpec(dirichlet=faces)

    def neumann(self, d: int) -> frozenset:
        every = {(ax, side) for ax in range(1, d + 1) for side in (0, 1)}
        return frozenset(every - set(self.dirichlet))


@dataclass(frozen=True)
class ModelSpec:
    """Physical configuration on the cylinder (0, T) x Omega.

    Parameters
    ----------
    domain : tuple of (lo, hi)
        Spatial box, one pair per axis.
    T : float
        Final time.
    Q : float
        Compressibility; Q = 0 selects the viscous limit.
    m : float
        Exponent in the reaction weight beta(phi) = phi**m.
    c_phi : float
        Mobility scale in alpha(phi) = (c_phi * phi)**3.
    f : tuple of float
        Buoyancy direction entering zeta = (1 - phi) * f; defaults to the
        unit vector along the last (vertical) axis.
    """

    domain: tuple
    T: float
    Q: float
    m: float
    c_phi: float
    sigma: SigmaSpec = SigmaSpec()
    f: tuple = ()
    form: str = "log_transformed"
    boundary: BoundarySpec | None = None

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown model form {self.form!r}")
        if (self.form == "viscous_limit") != (self.Q == 0):
            raise ValueError("viscous_limit requires Q == 0 and vice versa")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if not self.f:
            f = [0.0] * self.d
            f[-1] = 1.0
            object.__setattr__(self, "f", tuple(f))
        if len(self.f) != self.d:
            raise ValueError("f must have one component per spatial axis")
        if self.boundary is None:
            object.__setattr__(self, "boundary", BoundarySpec.all_dirichlet(self.d))

    @property
    def d(self) -> int:
        return len(self.domain)

    @property
    def viscous(self) -> bool:
        return self.form == "viscous_limit"


def porosity_from_state(model: ModelSpec, value):
    """Map the stored porosity state to the physical porosity."""
    if model.form == "log_transformed":
        return from_log_porosity(value)
    return np.asarray(value, dtype=float)


def to_log_porosity(phi):
    """phi -> -log(1 - phi); requires phi < 1."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi >= 1):
        raise ValueError("log transform needs phi < 1")
    return -np.log1p(-phi)


def from_log_porosity(w):
    """Inverse transform, always in (-inf, 1); positive w gives (0, 1)."""
    return -np.expm1(-np.asarray(w, dtype=float))


def effective_coefficients(model: ModelSpec, value, validate: bool = True):
    """Coefficients (alpha, beta, zeta_scalar) at the given porosity state.

    ``value`` is the model-form state variable: the porosity for full /
    small_porosity / viscous_limit, the log-transformed porosity for
    log_transformed.  zeta_scalar multiplies the direction vector f.
    ``validate=False`` skips the positivity check; assembly uses it because
    projected porosities can undershoot by rounding near discontinuities.
    """
    value = np.asarray(value, dtype=float)
    if validate and not np.all(value > 0):
        raise ValueError("porosity state must be positive")
    if model.form == "log_transformed":
        phi = from_log_porosity(value)
        one_minus = np.exp(-value)
    else:
        phi = value
        one_minus = 1.0 - value
    alpha = (model.c_phi * phi) ** 3
    beta = phi**model.m
    if model.form == "small_porosity":
        zeta = np.ones_like(phi)
    else:
        zeta = one_minus
    return alpha, beta, zeta


@dataclass(frozen=True)
class ScaleSet:
    """Reference scales for nondimensionalization.

    Derived scales: pressure ``u_hat = drho_g_hat * x_hat``, time
    ``t_hat = eta_hat / u_hat``, compressibility ``Q_hat = 1 / u_hat``.
    """

    x_hat: float
    drho_g_hat: float
    eta_hat: float

    @property
    def u_hat(self) -> float:
        return self.drho_g_hat * self.x_hat

    @property
    def t_hat(self) -> float:
        return self.eta_hat / self.u_hat

    @property
    def Q_hat(self) -> float:
        return 1.0 / self.u_hat


DESK_SCALES = ScaleSet(x_hat=1e4, drho_g_hat=5e3, eta_hat=1e19)


def nondimensionalize(scales: ScaleSet, *, length=None, time=None, pressure=None,
                      Q_phys=None):
    """Convert physical quantities to dimensionless ones; returns a dict.

    ``Q_phys`` is the pore-pressure modulus in Pa; the dimensionless
    compressibility is ``Q = 1 / (Q_hat * Q_phys)``.
    """
    if scales.x_hat <= 0 or scales.drho_g_hat <= 0 or scales.eta_hat <= 0:
        raise ValueError("scales must be positive")
    out = {}
    if length is not None:
        out["length"] = length / scales.x_hat
    if time is not None:
        out["time"] = time / scales.t_hat
    if pressure is not None:
        out["pressure"] = pressure / scales.u_hat
    if Q_phys is not None:
        if Q_phys <= 0:
            raise ValueError("Q_phys must be positive")
        out["Q"] = 1.0 / (scales.Q_hat * Q_phys)
    return out


def redimensionalize(scales: ScaleSet, *, length=None, time=None, pressure=None,
                     Q=None):
    out = {}
    if length is not None:
        out["length"] = length * scales.x_hat
    if time is not None:
        out["time"] = time * scales.t_hat
    if pressure is not None:
        out["pressure"] = pressure * scales.u_hat
    if Q is not None:
        out["Q_phys"] = 1.0 / (scales.Q_hat * Q)
    return out


def years_to_seconds(years: float) -> float:
    return years * 365.25 * 24 * 3600


def state_in_physical_range(model: ModelSpec, value) -> bool:
    """True when the porosity implied by the state lies inside (0, 1)."""
    phi = porosity_from_state(model, np.asarray(value, dtype=float))
    return bool(np.all((phi > 0) & (phi < 1)))
