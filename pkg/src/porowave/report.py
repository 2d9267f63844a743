"""Artifact emission: field dumps, iteration logs, manifests, rate tables.

The delimited formats are fixed:

* field dump, header ``t,x,value`` (one spatial axis) or ``t,x,y,value``;
* iteration log, header ``outer_k,inner_l,res_u,dofs,leaves``;
* indicator series, a ``# d=<spatial dim>`` comment line followed by the
  header ``outer_k,dofs,rel_phi,rel_u``;
* mesh dumps via :func:`porowave.mesh.dump_mesh`.

All floats are written with ``%.17g`` so a re-run reproduces every file
byte for byte.  The manifest is deterministic for the same reason; the
wall-clock stamp goes into a separate file next to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from .driver import RunResult, SlicedRun, relative_indicators
from .mesh import SliceSequence, concat_slices, dump_mesh
from .model import porosity_from_state

__all__ = [
    "SampledFields", "sample_fields", "write_field_csv",
    "write_iteration_log", "iteration_rows", "indicator_rows",
    "write_indicators", "mesh_of", "write_mesh_dumps", "manifest_text",
    "write_manifest", "rates_report", "format_rates", "render_figures",
]


def _g(x) -> str:
    return "%.17g" % float(x)


def _slices_of(run):
    """Normalize a run to a list of (t_span, RunResult)."""
    if isinstance(run, SlicedRun):
        return [(s.t_span, s.result) for s in run.slices]
    t0, t1 = run.phi.bounds[0]
    return [((t0, t1), run)]


# ---------------------------------------------------------------------------
# field sampling


@dataclass
class SampledFields:
    """Physical porosity and pressure on a uniform space-time grid.

    ``phi`` has shape (n_time, *n_space); ``u`` is None for viscous runs.
    """

    t: np.ndarray
    axes: list
    phi: np.ndarray
    u: np.ndarray | None


def sample_fields(run, n_time: int, n_space) -> SampledFields:
    """Evaluate a run's porosity and pressure on a uniform grid.

    ``n_space`` is one point count per spatial axis.  Times on a slice
    boundary are evaluated on the earlier slice, whose trace the next
    slice starts from, so the choice does not matter.
    """
    parts = _slices_of(run)
    model = parts[0][1].model
    if len(n_space) != len(model.domain):
        raise ValueError("one sample count per spatial axis required")
    t0 = parts[0][0][0]
    t1 = parts[-1][0][1]
    t_axis = np.linspace(t0, t1, n_time)
    axes = [np.linspace(float(a), float(b), n)
            for (a, b), n in zip(model.domain, n_space)]
    grids = np.meshgrid(*axes, indexing="ij")
    xflat = np.stack([g.ravel() for g in grids], axis=-1)

    ends = np.array([span[1] for span, _ in parts])
    owner = np.minimum(np.searchsorted(ends, t_axis, side="left"),
                       len(parts) - 1)
    shape_x = tuple(len(a) for a in axes)
    phi = np.empty((n_time,) + shape_x)
    u = None if model.viscous else np.empty_like(phi)
    for j, (_, res) in enumerate(parts):
        idx = np.nonzero(owner == j)[0]
        if idx.size == 0:
            continue
        pts = np.concatenate([
            np.column_stack([np.full(len(xflat), t_axis[i]), xflat])
            for i in idx])
        state_vals = res.phi.eval_abs(pts)
        vals = porosity_from_state(model, state_vals)
        phi[idx] = vals.reshape((idx.size,) + shape_x)
        if u is not None:
            u[idx] = res.state.u.eval_abs(pts).reshape((idx.size,) + shape_x)
    return SampledFields(t_axis, axes, phi, u)


def write_field_csv(path, sampled_t, axes, values) -> None:
    """Dump grid samples as ``t,x[,y],value`` rows."""
    names = ["x", "y"][: len(axes)]
    lines = ["t," + ",".join(names) + ",value"]
    mesh_pts = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in mesh_pts], axis=-1)
    vals = np.asarray(values)
    for i, t in enumerate(sampled_t):
        flat = vals[i].ravel()
        ts = _g(t)
        for row, v in zip(coords, flat):
            cells = [ts] + [_g(c) for c in row] + [_g(v)]
            lines.append(",".join(cells))
    _write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# iteration and indicator logs


def iteration_rows(run) -> list:
    """Inner-iteration rows of a run, slices concatenated in time order."""
    out = []
    for _, res in _slices_of(run):
        out.extend(res.rows)
    return out


def write_iteration_log(path, rows) -> None:
    lines = ["outer_k,inner_l,res_u,dofs,leaves"]
    for r in rows:
        lines.append("%d,%d,%s,%d,%d" % (r["outer_k"], r["inner_l"],
                                         _g(r["res_u"]), r["dofs"],
                                         r["leaves"]))
    _write_text(path, "\n".join(lines) + "\n")


def indicator_rows(run) -> list:
    """Per-outer-iteration (k, dofs, rel_phi, rel_u) across all slices.

    dofs is the combined pressure and porosity count of the iteration;
    rel_u is NaN for viscous runs, where no pressure is solved for.
    """
    out = []
    k = 0
    for _, res in _slices_of(run):
        if res.model.viscous:
            rel_phi = [r.diff_T / r.phi_norm_T for r in res.records]
            rel_u = [math.nan] * len(rel_phi)
        else:
            rel_phi, rel_u = relative_indicators(res)
        for r, rp, ru in zip(res.records, rel_phi, rel_u):
            k += 1
            out.append((k, r.dofs_u + r.dofs_phi, rp, ru))
    return out


def write_indicators(path, d: int, rows) -> None:
    lines = ["# d=%d" % d, "outer_k,dofs,rel_phi,rel_u"]
    for k, dofs, rp, ru in rows:
        lines.append("%d,%d,%s,%s" % (k, dofs, _g(rp), _g(ru)))
    _write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# mesh dumps


def mesh_of(run, which: str):
    """Final pressure or porosity partition; slices are concatenated."""
    meshes = []
    for _, res in _slices_of(run):
        if which == "u":
            meshes.append(res.state.mesh)
        else:
            meshes.append(res.phi.backend.mesh)
    if len(meshes) == 1:
        return meshes[0]
    return concat_slices(meshes)


def write_mesh_dumps(out_dir, run) -> list:
    out_dir = Path(out_dir)
    written = []
    for which, name in (("u", "mesh_u.txt"), ("phi", "mesh_phi.txt")):
        path = out_dir / name
        dump_mesh(str(path), mesh_of(run, which))
        written.append(name)
    return written


# ---------------------------------------------------------------------------
# manifest


def manifest_text(name: str, title: str, mode: str, run, files,
                  overrides=None) -> str:
    parts = _slices_of(run)
    model = parts[0][1].model
    tols = parts[0][1].tolerances
    lines = [
        "case=%s" % name,
        "title=%s" % title,
        "mode=%s" % mode,
        "form=%s" % model.form,
        "linearization=%s" % parts[0][1].linearization,
        "spatial_dim=%d" % len(model.domain),
        "T=%s" % _g(model.T),
        "n_slices=%d" % len(parts),
    ]
    if overrides:
        lines.append("overrides=%s" % ",".join(
            "%s=%s" % kv for kv in sorted(overrides.items())))
    tol_bits = []
    for f in dc_fields(tols):
        v = getattr(tols, f.name)
        if v is None:
            continue
        tol_bits.append("%s=%s" % (f.name, _g(v) if isinstance(v, float)
                                   else v))
    lines.append("tolerances: " + " ".join(tol_bits))
    for j, (span, res) in enumerate(parts):
        last = res.records[-1]
        lines.append(
            "slice %d: t=[%s,%s] outer=%d res_phi=%s res_u=%s dofs_u=%d "
            "leaves_u=%d dofs_phi=%d" % (
                j, _g(span[0]), _g(span[1]), res.outer_iterations,
                _g(last.res_phi), _g(last.res_u), last.dofs_u,
                last.pressure.leaves, last.dofs_phi))
    if isinstance(run, SlicedRun):
        for b in run.budget:
            lines.append("budget %d: eps_phi=%s eps_u=%s" % (
                b["slice"], _g(b["eps_phi"]), _g(b["eps_u"])))
    lines.append("files: " + " ".join(files))
    return "\n".join(lines) + "\n"


def write_manifest(out_dir, text, stamp: str) -> None:
    """Write the deterministic manifest plus the stamp in its own file."""
    out_dir = Path(out_dir)
    _write_text(out_dir / "manifest.txt", text)
    _write_text(out_dir / "timestamp.txt", stamp + "\n")


# ---------------------------------------------------------------------------
# rate report


def _read_indicators(path):
    d = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "d=" in line:
                    d = int(line.split("d=")[1])
                continue
            if line.startswith("outer_k"):
                continue
            k, dofs, rp, ru = line.split(",")
            rows.append((int(k), int(dofs), float(rp), float(ru)))
    if d is None:
        raise ValueError("indicator file lacks the '# d=' dimension line")
    return d, rows


def _decade_slope(points):
    """Log-log slope over the final dofs decade, None if undetermined."""
    valid = [(n, v) for n, v in points if v > 0 and math.isfinite(v)]
    if len(valid) < 2:
        return None, 0
    dmax = max(n for n, _ in valid)
    sub = [(n, v) for n, v in valid if n >= dmax / 10.0]
    if len(sub) < 2:
        sub = valid[-2:]
    ln = np.log10([p[0] for p in sub])
    lv = np.log10([p[1] for p in sub])
    return float(np.polyfit(ln, lv, 1)[0]), len(sub)


def rates_report(log_dir) -> dict:
    """Measured convergence slopes of the indicator series in a run
    directory, next to the expected ceilings 3/(d+1) for the pressure
    and 4/(d+1) for the porosity.

    Slopes are least-squares fits of log indicator against log dofs
    restricted to the final decade of dofs.  Requires at least three
    data rows.
    """
    path = Path(log_dir) / "indicators.csv"
    if not path.exists():
        raise ValueError(f"no indicator series found under {log_dir}")
    d, rows = _read_indicators(path)
    if len(rows) < 3:
        raise ValueError("need at least 3 data points for a rate fit")
    slope_phi, n_phi = _decade_slope([(n, rp) for _, n, rp, _ in rows])
    slope_u, n_u = _decade_slope([(n, ru) for _, n, _, ru in rows])
    out = {
        "d": d,
        "n_points": len(rows),
        "slope_phi": slope_phi,
        "slope_u": slope_u,
        "ceiling_phi": 4.0 / (d + 1),
        "ceiling_u": 3.0 / (d + 1),
        "decade_points_phi": n_phi,
        "decade_points_u": n_u,
    }
    out["table"] = format_rates(out)
    return out


def format_rates(r: dict) -> str:
    def row(name, slope, ceil, npts):
        meas = "--" if slope is None else "%+.4f" % slope
        return "%-4s %8s  ceiling %.4f  (%d decade points)" % (
            name, meas, ceil, npts)

    lines = [
        "rate fit over the final dofs decade, %d rows (d=%d)" % (
            r["n_points"], r["d"]),
        row("phi", r["slope_phi"], r["ceiling_phi"], r["decade_points_phi"]),
        row("u", r["slope_u"], r["ceiling_u"], r["decade_points_u"]),
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# figures


def _mesh_boxes(mesh):
    if isinstance(mesh, SliceSequence):
        return [(lvl, lo, hi) for _, lvl, lo, hi in mesh.entries()]
    out = []
    for k in mesh.leaves:
        lo, hi = mesh.abs_box(k)
        out.append((k[0], lo, hi))
    return out


def render_figures(out_dir, sampled: SampledFields, ind_rows, mesh) -> list:
    """Render overview figures next to the delimited dumps.

    Produces a field plot (space-time heat map plus final-time profiles
    in 1d, final-time heat maps in 2d), an indicator convergence plot,
    and a leaf-rectangle plot of the pressure partition (its final-time
    spatial footprint in 2d).  Returns the file names written.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    out_dir = Path(out_dir)
    meta = {"Software": "porowave"}
    written = []
    d = len(sampled.axes)

    fig, axs = plt.subplots(1, 2, figsize=(9, 3.4))
    if d == 1:
        x = sampled.axes[0]
        pm = axs[0].pcolormesh(x, sampled.t, sampled.phi, shading="auto")
        fig.colorbar(pm, ax=axs[0], label="porosity")
        axs[0].set_xlabel("x")
        axs[0].set_ylabel("t")
        axs[1].plot(x, sampled.phi[-1], label="porosity")
        axs[1].set_xlabel("x")
        if sampled.u is not None:
            twin = axs[1].twinx()
            twin.plot(x, sampled.u[-1], color="C1", label="pressure")
            twin.set_ylabel("pressure at final time")
        axs[1].set_ylabel("porosity at final time")
    else:
        x, y = sampled.axes
        pm = axs[0].pcolormesh(x, y, sampled.phi[-1].T, shading="auto")
        fig.colorbar(pm, ax=axs[0], label="porosity at final time")
        if sampled.u is not None:
            pm2 = axs[1].pcolormesh(x, y, sampled.u[-1].T, shading="auto")
            fig.colorbar(pm2, ax=axs[1], label="pressure at final time")
        for ax in axs:
            ax.set_xlabel("x")
            ax.set_ylabel("y")
            ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(out_dir / "fig_fields.png", dpi=120, metadata=meta)
    plt.close(fig)
    written.append("fig_fields.png")

    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    dofs = [r[1] for r in ind_rows]
    rp = [r[2] for r in ind_rows]
    ax.loglog(dofs, rp, "o-", label="rel. porosity indicator")
    ru = [(r[1], r[3]) for r in ind_rows if math.isfinite(r[3]) and r[3] > 0]
    if ru:
        ax.loglog([p[0] for p in ru], [p[1] for p in ru], "s-",
                  label="rel. pressure residual")
    ax.set_xlabel("degrees of freedom")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "fig_convergence.png", dpi=120, metadata=meta)
    plt.close(fig)
    written.append("fig_convergence.png")

    boxes = _mesh_boxes(mesh)
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    if d == 1:
        for _, lo, hi in boxes:
            ax.add_patch(Rectangle((lo[0], lo[1]), hi[0] - lo[0],
                                   hi[1] - lo[1], fill=False, lw=0.4))
        ax.set_xlabel("t")
        ax.set_ylabel("x")
    else:
        t_top = max(hi[0] for _, _, hi in boxes)
        for _, lo, hi in boxes:
            if hi[0] == t_top:
                ax.add_patch(Rectangle((lo[1], lo[2]), hi[1] - lo[1],
                                       hi[2] - lo[2], fill=False, lw=0.4))
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_aspect("equal")
    ax.autoscale_view()
    fig.tight_layout()
    fig.savefig(out_dir / "fig_mesh.png", dpi=120, metadata=meta)
    plt.close(fig)
    written.append("fig_mesh.png")
    return written


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
