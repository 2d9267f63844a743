"""Tensor-product finite element spaces on 1-irregular box meshes.

Three kinds of space back the least-squares solver:

* pressure: degree q+1 in time, q+2 nodes, times degree p per spatial
  axis, globally continuous, optionally zero on Dirichlet boundary parts;
* flux component i: degree q in time (discontinuous), degree p+1 along
  axis i (normal-continuous there) and p along the other spatial axes;
* discontinuous: degree m everywhere, no coupling (porosity).

Continuity is encoded through node keys: on continuous axes, endpoint
nodes are keyed by their exact rational coordinate and interior nodes by
their interval, so conforming neighbors share dofs automatically.  On
discontinuous axes the dofs are modal Legendre coefficients keyed by the
interval.  Hanging facets (coarse neighbor one level up) turn the fine
side's facet dofs into linear combinations of the coarse side's; the
constraints are resolved transitively so every cell gathers directly
from real dofs.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .fields import LegendreField, TreeBackend, leg_vander, leg_vander_deriv
from .mesh import SpaceTimeMesh
from .quadrature import gauss, lobatto

# node-key tags: endpoint of a continuous axis, interior of a continuous
# axis, modal coefficient of a discontinuous axis
_PT, _IN, _MODE = 0, 1, 2


@dataclass(frozen=True)
class LsqSpaceConfig:
    """Polynomial degrees of the least-squares pair; p = q + 1 enforced."""

    q: int = 2
    p: int = 3

    def __post_init__(self):
        if self.p != self.q + 1:
            raise ValueError("spatial degree must be q + 1")
        if self.q < 0:
            raise ValueError("negative degree")


@lru_cache(maxsize=None)
def _lagrange_to_leg(n: int) -> np.ndarray:
    """Columns express GLL Lagrange polynomials in normalized Legendre."""
    return np.linalg.inv(leg_vander(lobatto(n), n))


class AxisBasis:
    """1D basis on the reference interval [0, 1]."""

    def __init__(self, n: int, continuous: bool):
        self.n = n
        self.continuous = continuous
        if continuous:
            if n < 2:
                raise ValueError("continuous axes need degree >= 1")
            self.nodes = lobatto(n)
            self._C = _lagrange_to_leg(n)
        else:
            self.nodes = None
            self._C = np.eye(n)

    def values(self, s: np.ndarray) -> np.ndarray:
        return leg_vander(np.asarray(s, dtype=float), self.n) @ self._C

    def derivs(self, s: np.ndarray) -> np.ndarray:
        return leg_vander_deriv(np.asarray(s, dtype=float), self.n) @ self._C

    def to_leg(self) -> np.ndarray:
        """G[k, j] = integral of phi_k * basis_j over [0,1]."""
        return self._C


class TensorSpace:
    """A scalar tensor-product space over one SpaceTimeMesh."""

    def __init__(self, mesh: SpaceTimeMesh, degrees, continuous,
                 zero_parts=()):
        self.mesh = mesh
        self.degrees = tuple(int(d) for d in degrees)
        self.continuous = tuple(bool(c) for c in continuous)
        if len(self.degrees) != mesh.d + 1:
            raise ValueError("one degree per axis (time first) required")
        self.zero_parts = frozenset(zero_parts)
        for ax, _ in self.zero_parts:
            if not self.continuous[ax]:
                raise ValueError("essential conditions need a continuous axis")
        self.axes = [AxisBasis(d + 1, c)
                     for d, c in zip(self.degrees, self.continuous)]
        self.nloc = int(np.prod([b.n for b in self.axes]))
        self._build()

    # -- dof map ----------------------------------------------------------

    def _axis_keys(self, rb, axis):
        basis = self.axes[axis]
        lo, hi = rb[axis]
        keys = []
        for j in range(basis.n):
            if not basis.continuous:
                keys.append((_MODE, lo, hi, j))
            elif j == 0:
                keys.append((_PT, lo, Fraction(0), 0))
            elif j == basis.n - 1:
                keys.append((_PT, hi, Fraction(0), 0))
            else:
                keys.append((_IN, lo, hi, j))
        return keys

    def _cell_keys(self, key):
        rb = self.mesh.rel_box(key)
        per_axis = [self._axis_keys(rb, a) for a in range(len(rb))]
        shape = tuple(len(k) for k in per_axis)
        out = np.empty(shape, dtype=object)
        for idx in np.ndindex(shape):
            out[idx] = tuple(per_axis[a][idx[a]] for a in range(len(rb)))
        return out.reshape(-1)

    def _restriction(self, axis, child_lo, child_hi, parent_lo, parent_hi):
        """R[j_fine, j_coarse]: coarse 1D basis expressed on the child."""
        basis = self.axes[axis]
        lam = float((child_hi - child_lo) / (parent_hi - parent_lo))
        off = float((child_lo - parent_lo) / (parent_hi - parent_lo))
        if basis.continuous:
            s = off + lam * basis.nodes
            return basis.values(s)
        # modal: match polynomials, R[k, m] = int phi_k(s) phi_m(off+lam s)
        n = basis.n
        x, w = gauss(n)
        fine = leg_vander(x, n)
        coarse = leg_vander(off + lam * x, n)
        return np.einsum("q,qk,qm->km", w, fine, coarse)

    def _build(self):
        mesh = self.mesh
        key_ids: dict = {}
        cell_nodes = []
        for leaf in mesh.leaves:
            keys = self._cell_keys(leaf)
            ids = np.empty(len(keys), dtype=int)
            for i, k in enumerate(keys):
                kid = key_ids.get(k)
                if kid is None:
                    kid = len(key_ids)
                    key_ids[k] = kid
                ids[i] = kid
            cell_nodes.append((keys, ids))
        id_to_key = [None] * len(key_ids)
        for k, kid in key_ids.items():
            id_to_key[kid] = k

        shape = tuple(b.n for b in self.axes)
        constraints: dict = {}
        for ci, leaf in enumerate(mesh.leaves):
            rb = mesh.rel_box(leaf)
            for axis in range(len(rb)):
                if not self.continuous[axis]:
                    continue
                for side in (0, 1):
                    nbs = mesh.neighbors(leaf, axis, side)
                    if len(nbs) != 1 or nbs[0][0] != leaf[0] - 1:
                        continue
                    self._constrain_facet(
                        ci, leaf, axis, side, nbs[0], shape,
                        cell_nodes, key_ids, constraints)

        eliminated = set()
        for kid, key in enumerate(id_to_key):
            for ax, side in self.zero_parts:
                tag, coord, _, _ = key[ax]
                if tag == _PT and coord == (0 if side == 0 else 1):
                    eliminated.add(kid)
        # a slave on the boundary resolves through boundary masters anyway;
        # dropping it directly keeps the map smaller
        resolved = _resolve_constraints(constraints, eliminated)

        real_ids = [kid for kid in range(len(id_to_key))
                    if kid not in resolved and kid not in eliminated]
        real_ids.sort(key=lambda kid: id_to_key[kid])
        self.n_dofs = len(real_ids)
        col_of = {kid: c for c, kid in enumerate(real_ids)}

        self.cell_cols = []
        self.cell_C = []
        for keys, ids in cell_nodes:
            used: dict = {}
            rows = []
            for kid in ids:
                kid = int(kid)
                if kid in eliminated:
                    rows.append(())
                elif kid in resolved:
                    ms = tuple((used.setdefault(col_of[m], len(used)), c)
                               for m, c in resolved[kid])
                    rows.append(ms)
                else:
                    rows.append(((used.setdefault(col_of[kid], len(used)), 1.0),))
            cols = np.empty(len(used), dtype=int)
            for gc, lc in used.items():
                cols[lc] = gc
            C = np.zeros((len(rows), len(used)))
            for r, entries in enumerate(rows):
                for lc, c in entries:
                    C[r, lc] = c
            self.cell_cols.append(cols)
            self.cell_C.append(C)

        self._id_to_key = id_to_key
        self._col_of = col_of
        self._resolved = resolved
        self._eliminated = eliminated
        self._cell_ids = [ids for _, ids in cell_nodes]

    def _constrain_facet(self, ci, leaf, axis, side, coarse, shape,
                         cell_nodes, key_ids, constraints):
        mesh = self.mesh
        rb = mesh.rel_box(leaf)
        cb = mesh.rel_box(coarse)
        n_ax = self.axes[axis].n
        fine_idx = 0 if side == 0 else n_ax - 1
        coarse_idx = n_ax - 1 if side == 0 else 0
        mats = []
        for b in range(len(rb)):
            if b == axis:
                continue
            mats.append(self._restriction(b, rb[b][0], rb[b][1],
                                          cb[b][0], cb[b][1]))
        fine_keys = cell_nodes[ci][0].reshape(shape)
        coarse_keys = cell_nodes[mesh._leaf_index[coarse]][0].reshape(shape)
        fine_facet = np.take(fine_keys, fine_idx, axis=axis)
        coarse_facet = np.take(coarse_keys, coarse_idx, axis=axis)
        coarse_native = set(coarse_facet.reshape(-1))
        facet_shape = fine_facet.shape
        coarse_flat = coarse_facet.reshape(-1)
        for idx in np.ndindex(facet_shape):
            fkey = fine_facet[idx]
            if fkey in coarse_native:
                continue
            kid = key_ids[fkey]
            if kid in constraints:
                continue
            coefs = np.ones(1)
            for b, m in enumerate(mats):
                coefs = np.multiply.outer(coefs, m[idx[b], :]).reshape(-1)
            terms = [(key_ids[coarse_flat[j]], float(c))
                     for j, c in enumerate(coefs) if abs(c) > 1e-14]
            constraints[kid] = terms

    # -- evaluation -------------------------------------------------------

    def local_values(self, x: np.ndarray, ci: int) -> np.ndarray:
        """Constrained local dof values of global vector x on cell ci."""
        C = self.cell_C[ci]
        return C @ x[self.cell_cols[ci]]

    def tables(self, ci: int, s: np.ndarray, deriv_axis=None) -> np.ndarray:
        """Basis table (n_pts, nloc) at cell-relative points s.

        deriv_axis=None gives values; an axis index differentiates with
        respect to the absolute coordinate along that axis.
        """
        leaf = self.mesh.leaves[ci]
        lo, hi = self.mesh.abs_box(leaf)
        per_axis = []
        for a, basis in enumerate(self.axes):
            if deriv_axis == a:
                per_axis.append(basis.derivs(s[:, a]) / (hi[a] - lo[a]))
            else:
                per_axis.append(basis.values(s[:, a]))
        out = per_axis[0]
        for v in per_axis[1:]:
            out = (out[:, :, None] * v[:, None, :]).reshape(len(s), -1)
        return out

    def to_field(self, x: np.ndarray) -> LegendreField:
        """Exact conversion of a coefficient vector to cellwise Legendre."""
        coeffs = []
        shape = tuple(b.n for b in self.axes)
        for ci, leaf in enumerate(self.mesh.leaves):
            loc = self.local_values(x, ci).reshape(shape)
            lo, hi = self.mesh.abs_box(leaf)
            c = loc
            for a, basis in enumerate(self.axes):
                G = basis.to_leg()
                c = np.moveaxis(np.tensordot(G, np.moveaxis(c, a, 0), axes=1),
                                0, a)
            coeffs.append(c * float(np.prod(hi - lo)) ** 0.5)
        return LegendreField(self.mesh.cylinder.bounds, TreeBackend(self.mesh),
                             coeffs)

    def interpolate(self, f) -> np.ndarray:
        """Dof vector of a function belonging to the (unconstrained) space.

        Nodal axes sample at their nodes; modal axes project with Gauss
        rules that are exact when f is in the local polynomial space.
        """
        x = np.zeros(self.n_dofs)
        seen = np.zeros(self.n_dofs, dtype=bool)
        shape = tuple(b.n for b in self.axes)
        for ci, leaf in enumerate(self.mesh.leaves):
            lo, hi = self.mesh.abs_box(leaf)
            axes_pts = []
            weights = []
            for a, basis in enumerate(self.axes):
                if basis.continuous:
                    axes_pts.append(basis.nodes)
                    weights.append(None)
                else:
                    xg, wg = gauss(basis.n)
                    axes_pts.append(xg)
                    weights.append((wg, leg_vander(xg, basis.n)))
            grids = np.meshgrid(
                *[lo[a] + (hi[a] - lo[a]) * p for a, p in enumerate(axes_pts)],
                indexing="ij")
            pts = np.stack([g.ravel() for g in grids], axis=-1)
            vals = np.asarray(f(pts), dtype=float).reshape(
                tuple(len(p) for p in axes_pts))
            for a, w in enumerate(weights):
                if w is not None:
                    wg, V = w
                    vals = np.moveaxis(
                        np.tensordot((wg[:, None] * V).T,
                                     np.moveaxis(vals, a, 0), axes=1), 0, a)
            loc = vals.reshape(-1)
            for li, kid in enumerate(self._cell_ids[ci]):
                kid = int(kid)
                if kid in self._resolved or kid in self._eliminated:
                    continue
                col = self._col_of[kid]
                if not seen[col]:
                    x[col] = loc[li]
                    seen[col] = True
        return x


def _resolve_constraints(constraints: dict, eliminated: set) -> dict:
    """Expand slave-of-slave chains until all masters are real dofs."""
    resolved: dict = {}

    def resolve(kid):
        if kid in resolved:
            return resolved[kid]
        acc: dict = {}
        for m, c in constraints[kid]:
            if m in eliminated:
                continue
            if m in constraints:
                for mm, cc in resolve(m):
                    acc[mm] = acc.get(mm, 0.0) + c * cc
            else:
                acc[m] = acc.get(m, 0.0) + c
        out = tuple(sorted((m, c) for m, c in acc.items() if abs(c) > 1e-14))
        resolved[kid] = out
        return out

    for kid in list(constraints):
        resolve(kid)
    return resolved


def pressure_space(mesh: SpaceTimeMesh, config: LsqSpaceConfig,
                   dirichlet_parts) -> TensorSpace:
    """Globally continuous space, zero on the given spatial boundary parts.

    dirichlet_parts contains (spatial_axis, side) pairs with axis 0-based.
    """
    d = mesh.d
    degrees = (config.q + 1,) + (config.p,) * d
    continuous = (True,) * (d + 1)
    zero = frozenset((ax + 1, side) for ax, side in dirichlet_parts)
    return TensorSpace(mesh, degrees, continuous, zero)


def flux_space(mesh: SpaceTimeMesh, config: LsqSpaceConfig, component: int,
               zero_normal_parts=()) -> TensorSpace:
    """Flux component space: normal-continuous along its own axis only.

    zero_normal_parts lists (spatial_axis, side) boundary parts where the
    normal trace vanishes; only parts normal to `component` apply.
    """
    d = mesh.d
    degrees = [config.q] + [config.p] * d
    degrees[1 + component] = config.p + 1
    continuous = [False] * (d + 1)
    continuous[1 + component] = True
    zero = frozenset((ax + 1, side) for ax, side in zero_normal_parts
                     if ax == component)
    return TensorSpace(mesh, tuple(degrees), tuple(continuous), zero)


def discontinuous_space(mesh: SpaceTimeMesh, m: int) -> TensorSpace:
    return TensorSpace(mesh, (m,) * (mesh.d + 1), (False,) * (mesh.d + 1))


def build_dof_map(mesh: SpaceTimeMesh, config: LsqSpaceConfig, kind: str,
                  parts=(), m: int = 3) -> TensorSpace:
    """Construct the space for one field kind.

    kind is "pressure" (parts = Dirichlet boundary parts), "flux<i>" for
    spatial component i (parts = zero-normal boundary parts), or
    "discontinuous" (degree m).
    """
    if kind == "pressure":
        return pressure_space(mesh, config, parts)
    if kind.startswith("flux"):
        comp = int(kind[4:])
        if not 0 <= comp < mesh.d:
            raise ValueError(f"no flux component {comp} in {mesh.d} dimensions")
        return flux_space(mesh, config, comp, parts)
    if kind == "discontinuous":
        return discontinuous_space(mesh, m)
    raise ValueError(f"unsupported field kind: {kind!r}")
