"""Command-line runner producing the delimited artifacts and figures.

Flags: ``--case`` (shipped catalog name) or ``--config`` (TOML file with
the same schema), ``--mode`` from {full, adaptive, viscous, fd_compare,
rates}, ``--out`` directory, repeatable ``--override key=value`` for any
tolerance field, and ``--sample-grid NxM`` (time by space counts, NxMxK
with two spatial axes) for the field dumps.

Exit codes: 0 converged, 2 refinement or iteration budget exhausted,
3 porosity iteration stopped contracting, 4 configuration error.  On a
configuration error nothing is written.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields as dc_fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import report
from .catalog import (CaseSetup, ConfigError, _num, dump_config,
                      load_config_file, load_test_case)
from .driver import (BudgetError, NonContractionError, ToleranceSet,
                     run_sliced)
from .fdbaseline import FdConfig, compare_runs, convergence_rate, fd_solve
from .model import porosity_from_state

EXIT_OK = 0
EXIT_BUDGET = 2
EXIT_NONCONTRACTION = 3
EXIT_CONFIG = 4

MODES = ("full", "adaptive", "viscous", "fd_compare", "rates")


@dataclass
class RunConfig:
    """Everything a run needs, resolved and validated up front."""

    setup: CaseSetup | None
    mode: str
    out: Path
    tolerances: ToleranceSet | None
    grid: tuple | None
    n_slices: int
    run_mode: str
    sample_grid: tuple
    overrides: dict


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports problems as config errors instead of
    exiting the process on its own."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="porowave", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--case", help="shipped catalog case name")
    p.add_argument("--config", help="TOML config file path")
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--out", help="output directory (default runs/<case>)")
    p.add_argument("--override", action="append", default=[],
                   metavar="key=value",
                   help="tolerance field override, repeatable")
    p.add_argument("--sample-grid", metavar="NxM",
                   help="field dump resolution, time by space")
    return p


def _parse_sample_grid(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        counts = tuple(int(s) for s in parts)
    except ValueError as exc:
        raise ConfigError(f"bad sample grid {text!r}") from exc
    if len(counts) < 2 or any(n < 2 for n in counts):
        raise ConfigError(f"bad sample grid {text!r}")
    return counts


_TOL_FIELDS = {f.name: f for f in dc_fields(ToleranceSet)}


def _parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep or not raw:
            raise ConfigError(f"override {item!r} is not key=value")
        if key not in _TOL_FIELDS:
            raise ConfigError(f"unknown tolerance field {key!r}")
        ftype = _TOL_FIELDS[key].type
        if "bool" in ftype:
            if raw.lower() not in ("true", "false"):
                raise ConfigError(f"override {key} needs true or false")
            out[key] = raw.lower() == "true"
        elif ftype == "int":
            try:
                out[key] = int(raw)
            except ValueError as exc:
                raise ConfigError(f"override {key} needs an integer") from exc
        else:
            try:
                out[key] = float(_num(raw, key))
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"override {key}={raw!r} "
                                  "is not a number") from exc
    return out


def _apply_overrides(tols: ToleranceSet, overrides: dict) -> ToleranceSet:
    if not overrides:
        return tols
    try:
        return replace(tols, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _default_sample_grid(d: int) -> tuple:
    return (129, 129) if d == 1 else (33, 33, 33)


def resolve(argv) -> RunConfig:
    """Parse and validate arguments; nothing is written here."""
    args = _build_parser().parse_args(argv)
    if args.mode == "rates":
        if args.out:
            out = Path(args.out)
        elif args.case:
            out = Path("runs") / args.case
        else:
            raise ConfigError("rates mode needs --out or --case")
        return RunConfig(None, "rates", out, None, None, 0, "", (), {})

    if bool(args.case) == bool(args.config):
        raise ConfigError("give exactly one of --case or --config")
    setup = (load_test_case(args.case) if args.case
             else load_config_file(args.config))
    d = len(setup.model.domain)
    overrides = _parse_overrides(args.override)

    if args.mode == "adaptive":
        if setup.adaptive is None:
            raise ConfigError(f"case {setup.name} has no adaptive block")
        tols = setup.adaptive.tolerances
        grid, n_slices = setup.adaptive.grid, setup.adaptive.n_slices
        run_mode = "adaptive"
    else:
        if setup.tolerances is None:
            raise ConfigError(f"case {setup.name} has no fixed tolerances")
        tols = setup.tolerances
        grid, n_slices = setup.grid, setup.n_slices
        run_mode = "full"
    tols = _apply_overrides(tols, overrides)

    if args.mode == "viscous" and not setup.model.viscous:
        raise ConfigError("viscous mode needs a viscous-limit case")
    if args.mode == "fd_compare":
        if d != 1 or setup.model.viscous:
            raise ConfigError("fd_compare needs a one-dimensional "
                              "non-viscous case")

    sample_grid = (_parse_sample_grid(args.sample_grid) if args.sample_grid
                   else _default_sample_grid(d))
    if len(sample_grid) != 1 + d:
        raise ConfigError(f"sample grid needs {1 + d} axes for this case")

    out = Path(args.out) if args.out else Path("runs") / setup.name
    return RunConfig(setup, args.mode, out, tols, grid, n_slices, run_mode,
                     sample_grid, overrides)


# ---------------------------------------------------------------------------
# execution


def _run_case(cfg: RunConfig):
    s = cfg.setup
    return run_sliced(s.model, s.phi0, s.u0, cfg.tolerances, cfg.n_slices,
                      cfg.grid, mode=cfg.run_mode,
                      linearization=s.linearization)


def _run_dofs(run) -> int:
    total = 0
    for s in run.slices:
        last = s.result.records[-1]
        total += last.dofs_u + last.dofs_phi
    return total


def _fd_family(cfg: RunConfig, run):
    """Error-vs-dofs rows for a finite-difference ladder and the adaptive
    run, both against a fine finite-difference reference."""
    model = cfg.setup.model
    base = 4 * cfg.grid[1][0]
    nt, nx = cfg.sample_grid
    t_grid = np.linspace(0.0, model.T, nt)
    lo, hi = model.domain[0]
    x_grid = np.linspace(float(lo), float(hi), nx)

    def fd_phi(n):
        res = fd_solve(model, cfg.setup.phi0, cfg.setup.u0, FdConfig(nx=n))
        return res, porosity_from_state(model, res.sample_theta(t_grid,
                                                                x_grid))

    _, ref_vals = fd_phi(16 * base)
    entries = []
    for n in (base, 2 * base, 4 * base):
        res, vals = fd_phi(n)
        entries.append((f"fd_nx{n}", res.dofs(), vals))
    sampled = report.sample_fields(run, nt, (nx,))
    entries.append(("adaptive", _run_dofs(run), sampled.phi))
    rows = compare_runs(entries, ref_vals, t_grid, x_grid)
    fd_rate = convergence_rate(rows[:-1])
    return rows, fd_rate


def _write_compare(out_dir: Path, rows, fd_rate: float) -> list:
    lines = ["label,dofs,error"]
    for r in rows:
        lines.append("%s,%d,%s" % (r["label"], r["dofs"],
                                   "%.17g" % r["error"]))
    (out_dir / "fd_compare.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "fd_rates.txt").write_text(
        "fd porosity rate %.4f\n" % fd_rate)
    return ["fd_compare.csv", "fd_rates.txt"]


def _render_compare(out_dir: Path, rows) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    fd = [r for r in rows if r["label"].startswith("fd_")]
    ax.loglog([r["dofs"] for r in fd], [r["error"] for r in fd], "o-",
              label="finite differences")
    ad = [r for r in rows if r["label"] == "adaptive"]
    ax.loglog([r["dofs"] for r in ad], [r["error"] for r in ad], "s",
              label="adaptive least squares")
    ax.set_xlabel("degrees of freedom")
    ax.set_ylabel("porosity error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "fig_compare.png", dpi=120,
                metadata={"Software": "porowave"})
    plt.close(fig)
    return ["fig_compare.png"]


def _emit(cfg: RunConfig, run, compare=None) -> None:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.setup
    d = len(s.model.domain)
    files = ["config.toml"]
    (out / "config.toml").write_text(dump_config(s.config))

    sampled = report.sample_fields(run, cfg.sample_grid[0],
                                   cfg.sample_grid[1:])
    report.write_field_csv(out / "phi.csv", sampled.t, sampled.axes,
                           sampled.phi)
    files.append("phi.csv")
    if sampled.u is not None:
        report.write_field_csv(out / "u.csv", sampled.t, sampled.axes,
                               sampled.u)
        files.append("u.csv")

    report.write_iteration_log(out / "iterations.csv",
                               report.iteration_rows(run))
    files.append("iterations.csv")
    ind = report.indicator_rows(run)
    report.write_indicators(out / "indicators.csv", d, ind)
    files.append("indicators.csv")
    files.extend(report.write_mesh_dumps(out, run))
    files.extend(report.render_figures(out, sampled, ind,
                                       report.mesh_of(run, "u")))
    if compare is not None:
        rows, fd_rate = compare
        files.extend(_write_compare(out, rows, fd_rate))
        files.extend(_render_compare(out, rows))

    text = report.manifest_text(s.name, s.title, cfg.mode, run,
                                files + ["manifest.txt"],
                                overrides=cfg.overrides)
    stamp = datetime.now(timezone.utc).isoformat()
    report.write_manifest(out, text, stamp)


def main(argv=None) -> int:
    try:
        cfg = resolve(sys.argv[1:] if argv is None else argv)
        if cfg.mode == "rates":
            try:
                rates = report.rates_report(cfg.out)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            sys.stdout.write(rates["table"])
            (cfg.out / "rates.txt").write_text(rates["table"])
            return EXIT_OK
        run = _run_case(cfg)
        compare = _fd_family(cfg, run) if cfg.mode == "fd_compare" else None
        _emit(cfg, run, compare)
        last = run.slices[-1].result.records[-1]
        print(f"{cfg.setup.name}: {len(run.slices)} slice(s), "
              f"final res_phi {last.res_phi:.3e}, wrote {cfg.out}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetError as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NonContractionError as exc:
        print(f"iteration not contracting: {exc}", file=sys.stderr)
        return EXIT_NONCONTRACTION
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
