"""Shipped test-case configurations and strict config parsing.

Each case lives in ``cases/<name>.toml``.  Numeric leaves are strings so
rationals like ``12/25`` stay exact until they are parsed; grid sizes and
axis indices are plain integers.  Unknown keys anywhere in a config are
rejected.  Initial porosities are built in the state variable of the
chosen model form, so the log-transformed form receives -log(1 - phi0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from importlib import resources

import numpy as np
import tomli

from .driver import ToleranceSet
from .fields import UNIT, SpatialData
from .model import BoundarySpec, ModelSpec, SigmaSpec, to_log_porosity

CASES = ("fig1_comparison", "fig2_unphysical", "fig3_fullNonLin",
         "fig5_geoTest", "fig7_channel", "fig11_viscous")


class ConfigError(ValueError):
    """Malformed or unknown configuration input."""


_ALLOWED = {
    "": {"case", "model", "initial", "run", "tolerances", "adaptive"},
    "case": {"name", "title"},
    "model": {"domain", "T", "Q", "m", "c_phi", "form", "sigma", "boundary",
              "f"},
    "model.sigma": {"c0", "c1", "c2"},
    "model.boundary": {"dirichlet"},
    "initial": {"phi0", "u0"},
    "initial.phi0": {"kind", "breaks", "values", "value", "scale",
                     "sharpness", "offset", "centers", "weights", "cut_axis",
                     "cut", "outside"},
    "run": {"grid_space", "grid_time", "n_slices", "linearization"},
    "tolerances": {"tol_phi", "tol_proj", "tol_int", "tol_u", "tol_lsq"},
    "adaptive": {"grid_space", "grid_time", "n_slices", "tol_phi", "tol_int",
                 "rho_phi", "rho_u", "theta", "lambda_Theta", "lambda_Phi",
                 "lipschitz_update", "c_L", "warmup_iterations"},
}


@dataclass(frozen=True)
class AdaptiveSetup:
    """Published parameters for a tolerance-adaptive run of a case."""

    grid: tuple
    n_slices: int
    tolerances: ToleranceSet


@dataclass(frozen=True)
class CaseSetup:
    """A fully built test case: model, initial data and run parameters.

    ``grid`` is (time cells, spatial cells per axis) of the initial mesh
    per slice.  ``phi0`` is the initial porosity in the state variable of
    ``model.form``; ``u0`` is None for the viscous limit.
    """

    name: str
    title: str
    model: ModelSpec
    phi0: SpatialData
    u0: SpatialData | None
    tolerances: ToleranceSet | None
    grid: tuple
    n_slices: int
    linearization: str
    adaptive: AdaptiveSetup | None
    config: dict


def _num(value, path: str) -> float:
    if isinstance(value, bool) or isinstance(value, (list, dict)):
        raise ConfigError(f"{path}: expected a number")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        if "/" in value:
            return float(Fraction(value))
        return float(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{path}: bad number {value!r}") from exc


def _frac(value, path: str) -> Fraction:
    try:
        return Fraction(value)
    except (ValueError, TypeError, ZeroDivisionError) as exc:
        raise ConfigError(f"{path}: bad rational {value!r}") from exc


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer")
    return value


def _require(table: dict, keys, path: str):
    for k in keys:
        if k not in table:
            raise ConfigError(f"{path}: missing required key {k!r}")


def check_keys(cfg: dict) -> None:
    """Reject unknown keys at every nesting level."""
    stack = [("", cfg)]
    while stack:
        path, table = stack.pop()
        allowed = _ALLOWED[path]
        for key, value in table.items():
            here = f"{path}.{key}" if path else key
            if key not in allowed:
                raise ConfigError(f"unknown key {here!r}")
            if isinstance(value, dict):
                if here not in _ALLOWED:
                    raise ConfigError(f"unexpected table {here!r}")
                stack.append((here, value))


def _build_model(table: dict) -> tuple[ModelSpec, list]:
    _require(table, ("domain", "T", "Q", "m", "c_phi", "form"), "model")
    dom_exact = []
    for pair in table["domain"]:
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError("model.domain entries must be [lo, hi] pairs")
        dom_exact.append((_frac(pair[0], "model.domain"),
                         _frac(pair[1], "model.domain")))
    domain = tuple((float(a), float(b)) for a, b in dom_exact)
    sig = table.get("sigma", {})
    sigma = SigmaSpec(_num(sig.get("c0", 1), "model.sigma.c0"),
                      _num(sig.get("c1", 0), "model.sigma.c1"),
                      _num(sig.get("c2", 1), "model.sigma.c2"))
    boundary = None
    if "boundary" in table:
        faces = set()
        for pair in table["boundary"].get("dirichlet", []):
            ax = _int(pair[0], "model.boundary.dirichlet")
            side = _int(pair[1], "model.boundary.dirichlet")
            if not (1 <= ax <= len(domain) and side in (0, 1)):
                raise ConfigError("model.boundary.dirichlet: bad face "
                                  f"{pair!r}")
            faces.add((ax, side))
        boundary = BoundarySpec(dirichlet=frozenset(faces))
    f = tuple(_num(v, "model.f") for v in table.get("f", []))
    try:
        model = ModelSpec(domain=domain, T=_num(table["T"], "model.T"),
                          Q=_num(table["Q"], "model.Q"),
                          m=_num(table["m"], "model.m"),
                          c_phi=_num(table["c_phi"], "model.c_phi"),
                          sigma=sigma, f=f, form=str(table["form"]),
                          boundary=boundary)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return model, dom_exact


def _state_value(v: float, transform: bool, path: str) -> float:
    if transform:
        if v >= 1:
            raise ConfigError(f"{path}: porosity {v} needs to be below 1")
        return float(to_log_porosity(v))
    return v


def _rel_cut(value, axis_bounds, path: str) -> Fraction:
    lo, hi = axis_bounds
    rel = (_frac(value, path) - lo) / (hi - lo)
    if not 0 < rel < 1:
        raise ConfigError(f"{path}: position {value!r} outside the domain")
    return rel


def _build_phi0(table: dict, model: ModelSpec, dom_exact) -> SpatialData:
    _require(table, ("kind",), "initial.phi0")
    kind = table["kind"]
    transform = model.form == "log_transformed"
    bounds = list(model.domain)
    if kind == "constant":
        _require(table, ("value",), "initial.phi0")
        v = _state_value(_num(table["value"], "initial.phi0.value"),
                        transform, "initial.phi0.value")
        return SpatialData.constant(bounds, v)
    if kind == "step":
        if model.d != 1:
            raise ConfigError("step initial data is one-dimensional")
        _require(table, ("breaks", "values"), "initial.phi0")
        breaks = [_rel_cut(b, dom_exact[0], "initial.phi0.breaks")
                  for b in table["breaks"]]
        if sorted(breaks) != breaks or len(set(breaks)) != len(breaks):
            raise ConfigError("initial.phi0.breaks must increase strictly")
        vals = [_state_value(_num(v, "initial.phi0.values"), transform,
                             "initial.phi0.values")
                for v in table["values"]]
        if len(vals) != len(breaks) + 1:
            raise ConfigError("initial.phi0 needs one value per interval")
        return SpatialData.step_1d(bounds, breaks, vals)
    if kind == "gauss_plateau":
        _require(table, ("scale", "sharpness", "offset", "centers",
                         "weights", "cut_axis", "cut", "outside"),
                 "initial.phi0")
        scale = _num(table["scale"], "initial.phi0.scale")
        sharp = _num(table["sharpness"], "initial.phi0.sharpness")
        offset = _num(table["offset"], "initial.phi0.offset")
        centers = [np.array([float(_frac(c, "initial.phi0.centers"))
                             for c in pt]) for pt in table["centers"]]
        weights = [_num(w, "initial.phi0.weights")
                   for w in table["weights"]]
        if len(weights) != len(centers):
            raise ConfigError("initial.phi0 needs one weight per center")
        if any(len(c) != model.d for c in centers):
            raise ConfigError("initial.phi0.centers have the wrong "
                              "dimension")
        ax = _int(table["cut_axis"], "initial.phi0.cut_axis") - 1
        if not 0 <= ax < model.d:
            raise ConfigError("initial.phi0.cut_axis out of range")
        cut = _rel_cut(table["cut"], dom_exact[ax], "initial.phi0.cut")
        outside = _state_value(
            _num(table["outside"], "initial.phi0.outside"), transform,
            "initial.phi0.outside")

        def bump(pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            acc = np.full(len(pts), offset)
            for c, w in zip(centers, weights):
                acc += w * np.exp(-sharp * np.sum((pts - c) ** 2, axis=1))
            vals = scale * acc
            if transform:
                return -np.log1p(-vals)
            return vals

        inside_box = tuple((Fraction(0), cut) if a == ax else UNIT
                           for a in range(model.d))
        outside_box = tuple((cut, Fraction(1)) if a == ax else UNIT
                            for a in range(model.d))
        widths = [hi - lo for lo, hi in bounds]
        widths[ax] *= float(1 - cut)
        coeff = np.full((1,) * model.d,
                        outside * math.prod(widths) ** 0.5)
        return SpatialData(bounds, [(inside_box, ("fn", bump)),
                                    (outside_box, ("poly", coeff))])
    raise ConfigError(f"initial.phi0.kind: unknown kind {kind!r}")


def _build_fixed_tolerances(table: dict) -> ToleranceSet:
    _require(table, ("tol_phi",), "tolerances")
    kw = {k: _num(v, f"tolerances.{k}") for k, v in table.items()}
    try:
        return ToleranceSet(**kw)
    except ValueError as exc:
        raise ConfigError(f"tolerances: {exc}") from exc


def _build_adaptive(table: dict) -> AdaptiveSetup:
    _require(table, ("grid_space", "grid_time", "n_slices", "tol_phi",
                     "rho_phi", "theta", "lambda_Theta"), "adaptive")
    grid = (_int(table["grid_time"], "adaptive.grid_time"),
            tuple(_int(n, "adaptive.grid_space")
                  for n in table["grid_space"]))
    kw = {"tol_phi": _num(table["tol_phi"], "adaptive.tol_phi"),
          "rho_phi": _num(table["rho_phi"], "adaptive.rho_phi"),
          "theta": _num(table["theta"], "adaptive.theta"),
          "lambda_Theta_init": _num(table["lambda_Theta"],
                                    "adaptive.lambda_Theta")}
    if "rho_u" in table:
        kw["rho_u"] = _num(table["rho_u"], "adaptive.rho_u")
    if "lambda_Phi" in table:
        kw["lambda_Phi_init"] = _num(table["lambda_Phi"],
                                     "adaptive.lambda_Phi")
    if "tol_int" in table:
        kw["tol_int"] = _num(table["tol_int"], "adaptive.tol_int")
    if "c_L" in table:
        kw["c_L"] = _num(table["c_L"], "adaptive.c_L")
    if "lipschitz_update" in table:
        if not isinstance(table["lipschitz_update"], bool):
            raise ConfigError("adaptive.lipschitz_update must be a boolean")
        kw["lipschitz_update_enabled"] = table["lipschitz_update"]
    if "warmup_iterations" in table:
        kw["warmup_iterations"] = _int(table["warmup_iterations"],
                                       "adaptive.warmup_iterations")
    try:
        tols = ToleranceSet(**kw)
    except ValueError as exc:
        raise ConfigError(f"adaptive: {exc}") from exc
    return AdaptiveSetup(grid=grid, n_slices=_int(table["n_slices"],
                                                  "adaptive.n_slices"),
                         tolerances=tols)


def parse_case(cfg: dict, source: str = "<config>") -> CaseSetup:
    """Build a CaseSetup from a parsed config dictionary."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"{source}: top level must be a table")
    check_keys(cfg)
    _require(cfg, ("model", "initial", "run"), source)
    model, dom_exact = _build_model(cfg["model"])
    init = cfg["initial"]
    _require(init, ("phi0",), "initial")
    phi0 = _build_phi0(init["phi0"], model, dom_exact)
    u0 = None
    if "u0" in init:
        if model.viscous:
            raise ConfigError("initial.u0 has no meaning in the viscous "
                              "limit")
        u0 = SpatialData.constant(list(model.domain),
                                  _num(init["u0"], "initial.u0"))
    elif not model.viscous:
        raise ConfigError("initial: missing required key 'u0'")
    run = cfg["run"]
    _require(run, ("grid_space", "grid_time", "n_slices"), "run")
    grid = (_int(run["grid_time"], "run.grid_time"),
            tuple(_int(n, "run.grid_space") for n in run["grid_space"]))
    if len(grid[1]) != model.d:
        raise ConfigError("run.grid_space needs one entry per spatial axis")
    linearization = run.get("linearization", "quasilinear")
    if linearization not in ("quasilinear", "gauss_newton"):
        raise ConfigError(f"run.linearization: unknown {linearization!r}")
    tols = _build_fixed_tolerances(cfg["tolerances"]) \
        if "tolerances" in cfg else None
    adaptive = _build_adaptive(cfg["adaptive"]) if "adaptive" in cfg else None
    if tols is None and adaptive is None:
        raise ConfigError(f"{source}: needs a tolerances or adaptive block")
    case = cfg.get("case", {})
    return CaseSetup(name=case.get("name", source),
                     title=case.get("title", ""), model=model, phi0=phi0,
                     u0=u0, tolerances=tols, grid=grid,
                     n_slices=_int(run["n_slices"], "run.n_slices"),
                     linearization=linearization, adaptive=adaptive,
                     config=cfg)


def case_text(name: str) -> str:
    """Raw TOML text of a shipped case."""
    if name not in CASES:
        raise ConfigError(f"unknown case {name!r}; available: "
                          + ", ".join(CASES))
    path = resources.files("porowave") / "cases" / f"{name}.toml"
    return path.read_text()


def load_test_case(name: str) -> CaseSetup:
    """Load one of the shipped cases by name."""
    cfg = tomli.loads(case_text(name))
    setup = parse_case(cfg, source=name)
    if setup.name != name:
        raise ConfigError(f"case file {name} declares name {setup.name!r}")
    return setup


def load_config_file(path) -> CaseSetup:
    """Parse an on-disk config with the same schema as the shipped cases."""
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"bad TOML in {path}: {exc}") from exc
    return parse_case(cfg, source=str(path))


def with_form(setup: CaseSetup, form: str) -> CaseSetup:
    """The same case re-built in a different model formulation."""
    cfg = dict(setup.config)
    cfg["model"] = dict(cfg["model"])
    cfg["model"]["form"] = form
    rebuilt = parse_case(cfg, source=setup.name)
    return replace(rebuilt, name=setup.name, title=setup.title)


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, list):
        return "[" + ", ".join(_fmt_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize value {value!r}")


def dump_config(cfg: dict) -> str:
    """Serialize a parsed config back to TOML (round-trip stable)."""
    lines = []

    def emit(prefix: str, table: dict):
        scalars = [(k, v) for k, v in table.items()
                   if not isinstance(v, dict)]
        subs = [(k, v) for k, v in table.items() if isinstance(v, dict)]
        if prefix and (scalars or not subs):
            lines.append(f"[{prefix}]")
        for k, v in scalars:
            lines.append(f"{k} = {_fmt_value(v)}")
        if prefix and (scalars or not subs):
            lines.append("")
        for k, v in subs:
            emit(f"{prefix}.{k}" if prefix else k, v)

    emit("", cfg)
    return "\n".join(lines)
