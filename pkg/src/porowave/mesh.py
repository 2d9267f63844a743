"""Dyadic space-time box meshes over a slice cylinder (t_a, t_b) x Omega.

Cells are identified by integer keys (level, time index, spatial indices)
relative to a macro grid, so geometry is derived, never stored: merges and
facet matching are exact integer/rational operations.  Refinement is
isotropic (all d+1 axes split at once) and meshes are kept 1-irregular:
facet-adjacent leaves differ by at most one level.

Two mesh flavours exist.  ``SpaceTimeMesh`` is the dyadic tree used by the
solvers.  ``TimeStackMesh`` is the result of :func:`make_time_uniform`:
its cells keep tree footprints in space but share a global set of time
breakpoints, which is what running time integrals need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

# key layout: (level, time index, (spatial indices...))
CellKey = tuple


@dataclass(frozen=True)
class Cylinder:
    """Slice cylinder: time interval times an axis-aligned spatial box."""

    t0: float
    t1: float
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("empty time interval")
        for a, b in zip(self.lo, self.hi):
            if not b > a:
                raise ValueError("empty spatial interval")

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def bounds(self):
        """Per-axis (lo, hi) with axis 0 = time."""
        return [(self.t0, self.t1)] + [(a, b) for a, b in zip(self.lo, self.hi)]

    def abs_of_rel(self, axis: int, r) -> float:
        a, b = self.bounds[axis]
        return a + (b - a) * float(r)

    def rel_of_abs(self, axis: int, x) -> float:
        a, b = self.bounds[axis]
        return (np.asarray(x, dtype=float) - a) / (b - a)

    def measure(self) -> float:
        out = self.t1 - self.t0
        for a, b in zip(self.lo, self.hi):
            out *= b - a
        return out

    def same_space(self, other: "Cylinder") -> bool:
        return self.lo == other.lo and self.hi == other.hi


def rel_interval(n: int, level: int, idx: int) -> tuple[Fraction, Fraction]:
    den = n << level
    return Fraction(idx, den), Fraction(idx + 1, den)


class SpaceTimeMesh:
    """Immutable 1-irregular dyadic box tree over a cylinder.

    Parameters
    ----------
    cylinder : Cylinder
    macro : (nt, (nx_1, ..., nx_d))
        Root grid: nt time cells and nx_j cells along spatial axis j.
    leaf_keys : iterable of CellKey, optional
        Defaults to the macro grid itself (all level-0 cells).
    """

    def __init__(self, cylinder: Cylinder, macro, leaf_keys=None):
        nt, nxs = macro
        nxs = tuple(int(n) for n in nxs)
        if len(nxs) != cylinder.d:
            raise ValueError("macro grid dimension mismatch")
        self.cylinder = cylinder
        self.macro = (int(nt), nxs)
        if leaf_keys is None:
            leaf_keys = [
                (0, it, ix)
                for it in range(int(nt))
                for ix in _index_grid(nxs)
            ]
        self.leaves = tuple(sorted(leaf_keys))
        self._leafset = frozenset(self.leaves)
        self._leaf_index = {k: i for i, k in enumerate(self.leaves)}
        self._facet_index = None
        self._relbox_cache: dict = {}

    # -- geometry ---------------------------------------------------------

    def rel_box(self, key: CellKey):
        """Per-axis (lo, hi) Fractions of the key's box, axis 0 = time."""
        cached = self._relbox_cache.get(key)
        if cached is not None:
            return cached
        lvl, it, ix = key
        nt, nxs = self.macro
        out = [rel_interval(nt, lvl, it)]
        out.extend(rel_interval(nxs[j], lvl, ix[j]) for j in range(len(nxs)))
        box = tuple(out)
        self._relbox_cache[key] = box
        return box

    def abs_box(self, key: CellKey):
        rb = self.rel_box(key)
        lo = [self.cylinder.abs_of_rel(a, iv[0]) for a, iv in enumerate(rb)]
        hi = [self.cylinder.abs_of_rel(a, iv[1]) for a, iv in enumerate(rb)]
        return np.array(lo), np.array(hi)

    @property
    def d(self) -> int:
        return self.cylinder.d

    @property
    def max_level(self) -> int:
        return max(k[0] for k in self.leaves)

    def measure(self) -> float:
        total = 0.0
        for k in self.leaves:
            lo, hi = self.abs_box(k)
            total += float(np.prod(hi - lo))
        return total

    # -- tree structure ---------------------------------------------------

    def children(self, key: CellKey):
        lvl, it, ix = key
        out = []
        for dt in (0, 1):
            for dx in _index_grid((2,) * len(ix)):
                cix = tuple(2 * ix[j] + dx[j] for j in range(len(ix)))
                out.append((lvl + 1, 2 * it + dt, cix))
        return out

    @staticmethod
    def parent(key: CellKey):
        lvl, it, ix = key
        if lvl == 0:
            return None
        return (lvl - 1, it >> 1, tuple(i >> 1 for i in ix))

    def contains_leaf(self, key: CellKey) -> bool:
        return key in self._leafset

    # -- adjacency --------------------------------------------------------

    def _build_facet_index(self):
        lo_idx: dict = {}
        hi_idx: dict = {}
        for k in self.leaves:
            rb = self.rel_box(k)
            for ax, (a, b) in enumerate(rb):
                lo_idx.setdefault((ax, a), []).append(k)
                hi_idx.setdefault((ax, b), []).append(k)
        self._facet_index = (lo_idx, hi_idx)

    def neighbors(self, key: CellKey, axis: int, side: int):
        """Leaf neighbors across the given facet (axis in 0..d, side 0/1)."""
        if self._facet_index is None:
            self._build_facet_index()
        lo_idx, hi_idx = self._facet_index
        rb = self.rel_box(key)
        coord = rb[axis][1] if side == 1 else rb[axis][0]
        cands = (lo_idx if side == 1 else hi_idx).get((axis, coord), ())
        out = []
        for c in cands:
            cb = self.rel_box(c)
            if all(
                cb[a][0] < rb[a][1] and rb[a][0] < cb[a][1]
                for a in range(len(rb))
                if a != axis
            ):
                out.append(c)
        return sorted(out)

    # -- refinement -------------------------------------------------------

    def refine(self, cells) -> "SpaceTimeMesh":
        """Split the marked leaves plus the closure keeping 1-irregularity."""
        marks = set(cells)
        if not marks <= self._leafset:
            raise ValueError("marks must be current leaves")
        queue = list(marks)
        while queue:
            c = queue.pop()
            for axis in range(self.d + 1):
                for side in (0, 1):
                    for n in self.neighbors(c, axis, side):
                        if n[0] < c[0] and n not in marks:
                            marks.add(n)
                            queue.append(n)
        new_leaves = []
        for k in self.leaves:
            if k in marks:
                new_leaves.extend(self.children(k))
            else:
                new_leaves.append(k)
        return SpaceTimeMesh(self.cylinder, self.macro, new_leaves)

    def check_one_irregular(self) -> bool:
        for k in self.leaves:
            for axis in range(self.d + 1):
                for side in (0, 1):
                    for n in self.neighbors(k, axis, side):
                        if abs(n[0] - k[0]) > 1:
                            return False
        return True

    # -- queries ----------------------------------------------------------

    def split_set(self) -> set:
        """All proper ancestors of leaves (the interior nodes of the tree)."""
        out: set = set()
        for k in self.leaves:
            p = self.parent(k)
            while p is not None and p not in out:
                out.add(p)
                p = self.parent(p)
        return out

    def shadow_keys(self):
        """Finest spatial footprint: dyadic spatial keys (level, ix) covering
        Omega so that every leaf's footprint is a union of shadow cells."""
        skeys = {(k[0], k[2]) for k in self.leaves}
        covered = set()
        for lvl, ix in skeys:
            l, i = lvl, ix
            while l > 0:
                l -= 1
                i = tuple(v >> 1 for v in i)
                covered.add((l, i))
        return sorted(s for s in skeys if s not in covered)

    def locate_rel(self, pts: np.ndarray) -> np.ndarray:
        """Leaf index for each relative-coordinate point (n, d+1).

        Points on facets belong to the lexicographically smallest leaf,
        i.e. the lower/left cell; intervals are treated as (lo, hi] with
        the domain's bottom faces closed.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        nt, nxs = self.macro
        ns = (nt,) + nxs
        out = np.full(len(pts), -1, dtype=int)
        levels = sorted({k[0] for k in self.leaves})
        undecided = np.arange(len(pts))
        for lvl in levels:
            if len(undecided) == 0:
                break
            idxs = []
            for a, n in enumerate(ns):
                N = n << lvl
                i = np.ceil(pts[undecided, a] * N).astype(int) - 1
                idxs.append(np.clip(i, 0, N - 1))
            hits = []
            for row, j in enumerate(undecided):
                key = (lvl, int(idxs[0][row]), tuple(int(ax[row]) for ax in idxs[1:]))
                li = self._leaf_index.get(key)
                if li is not None:
                    out[j] = li
                    hits.append(row)
            undecided = np.delete(undecided, hits)
        if np.any(out < 0):
            raise ValueError("point outside mesh (or above max refinement)")
        return out

    def cells_intersecting(self, relbox):
        """Leaves whose box intersects the given relative box with volume."""
        out = []
        for k in self.leaves:
            rb = self.rel_box(k)
            if all(rb[a][0] < relbox[a][1] and relbox[a][0] < rb[a][1]
                   for a in range(len(rb))):
                out.append(k)
        return out

    def __eq__(self, other):
        return (
            isinstance(other, SpaceTimeMesh)
            and self.macro == other.macro
            and self.cylinder == other.cylinder
            and self.leaves == other.leaves
        )

    def __hash__(self):
        return hash((self.macro, self.leaves))

    def __len__(self):
        return len(self.leaves)


def _index_grid(ns):
    if not ns:
        return [()]
    rest = _index_grid(ns[1:])
    return [(i,) + r for i in range(ns[0]) for r in rest]


def uniform_mesh(cylinder: Cylinder, n_time: int, n_space) -> SpaceTimeMesh:
    return SpaceTimeMesh(cylinder, (n_time, tuple(n_space)))


def merge(a: SpaceTimeMesh, b: SpaceTimeMesh) -> SpaceTimeMesh:
    """Coarsest common refinement of two meshes over the same cylinder."""
    if a.macro != b.macro or a.cylinder != b.cylinder:
        raise ValueError("meshes live on different root cylinders")
    split = a.split_set() | b.split_set()
    nt, nxs = a.macro
    leaves = []
    stack = [(0, it, ix) for it in range(nt) for ix in _index_grid(nxs)]
    while stack:
        k = stack.pop()
        if k in split:
            stack.extend(a.children(k))
        else:
            leaves.append(k)
    return SpaceTimeMesh(a.cylinder, a.macro, leaves)


class TimeStackMesh:
    """Mesh whose cells share a global, slice-wide set of time breakpoints.

    Cells are (spatial dyadic key, time interval) pairs; the time intervals
    of every vertical stack walk through the same cut set, so no time facet
    abuts a neighbor's interior breakpoint.  Spatial hanging nodes remain.
    """

    def __init__(self, cylinder: Cylinder, macro, cells, cuts):
        self.cylinder = cylinder
        self.macro = (int(macro[0]), tuple(int(n) for n in macro[1]))
        # cell: ((level, (ix...)), t_lo: Fraction, t_hi: Fraction)
        self.cells = tuple(sorted(cells))
        self.cuts = tuple(sorted(set(cuts)))

    @property
    def d(self) -> int:
        return self.cylinder.d

    def rel_box(self, cell):
        (lvl, ix), ta, tb = cell
        _, nxs = self.macro
        out = [(ta, tb)]
        out.extend(rel_interval(nxs[j], lvl, ix[j]) for j in range(len(nxs)))
        return tuple(out)

    def abs_box(self, cell):
        rb = self.rel_box(cell)
        lo = [self.cylinder.abs_of_rel(a, iv[0]) for a, iv in enumerate(rb)]
        hi = [self.cylinder.abs_of_rel(a, iv[1]) for a, iv in enumerate(rb)]
        return np.array(lo), np.array(hi)

    def measure(self) -> float:
        total = 0.0
        for c in self.cells:
            lo, hi = self.abs_box(c)
            total += float(np.prod(hi - lo))
        return total

    def __len__(self):
        return len(self.cells)

    def __eq__(self, other):
        return (
            isinstance(other, TimeStackMesh)
            and self.macro == other.macro
            and self.cylinder == other.cylinder
            and self.cells == other.cells
        )

    def __hash__(self):
        return hash((self.macro, self.cells))


def make_time_uniform(mesh) -> TimeStackMesh:
    """Split leaves in time until all stacks share the global cut set.

    On a connected box domain, propagating interior time breakpoints to
    spatially adjacent leaves terminates exactly when every leaf is split
    at every global breakpoint that lies strictly inside it, so the result
    is computed directly from the global cut set.  Idempotent; only time
    splits are introduced.
    """
    if isinstance(mesh, TimeStackMesh):
        return mesh
    cuts = set()
    entries = []
    for k in mesh.leaves:
        rb = mesh.rel_box(k)
        cuts.add(rb[0][0])
        cuts.add(rb[0][1])
        entries.append(((k[0], k[2]), rb[0][0], rb[0][1]))
    ordered = sorted(cuts)
    cells = []
    for skey, ta, tb in entries:
        inner = [c for c in ordered if ta < c < tb]
        pts = [ta] + inner + [tb]
        for lo, hi in zip(pts[:-1], pts[1:]):
            cells.append((skey, lo, hi))
    return TimeStackMesh(mesh.cylinder, mesh.macro, cells, ordered)


class SliceSequence:
    """Read-only concatenation of per-slice meshes along the time axis."""

    def __init__(self, meshes):
        if not meshes:
            raise ValueError("need at least one slice")
        self.meshes = tuple(meshes)
        omega = self.meshes[0].cylinder
        t = omega.t0
        for m in self.meshes:
            c = m.cylinder
            if not c.same_space(omega):
                raise ValueError("slices must share the spatial domain")
            if abs(c.t0 - t) > 1e-12 * max(1.0, abs(t)):
                raise ValueError("slices must abut in time")
            t = c.t1
        self.t_span = (self.meshes[0].cylinder.t0, t)

    def entries(self):
        """Yield (slice index, level, lo array, hi array) per leaf."""
        for j, m in enumerate(self.meshes):
            if isinstance(m, TimeStackMesh):
                for c in m.cells:
                    lo, hi = m.abs_box(c)
                    yield j, c[0][0], lo, hi
            else:
                for k in m.leaves:
                    lo, hi = m.abs_box(k)
                    yield j, k[0], lo, hi

    def __len__(self):
        return sum(len(m) for m in self.meshes)

    def measure(self) -> float:
        return sum(m.measure() for m in self.meshes)


def concat_slices(meshes) -> SliceSequence:
    return SliceSequence(meshes)


def dump_mesh(target, mesh) -> None:
    """Write the plain-text leaf listing.

    One leaf per line, "level t0 t1 x0 x1 [y0 y1]", preceded by a summary
    header with the leaf count and maximum depth.
    """
    if isinstance(mesh, SliceSequence):
        rows = [(lvl, lo, hi) for _, lvl, lo, hi in mesh.entries()]
    elif isinstance(mesh, TimeStackMesh):
        rows = []
        for c in mesh.cells:
            lo, hi = mesh.abs_box(c)
            rows.append((c[0][0], lo, hi))
    else:
        rows = []
        for k in mesh.leaves:
            lo, hi = mesh.abs_box(k)
            rows.append((k[0], lo, hi))
    depth = max((r[0] for r in rows), default=0)
    lines = [f"# leaves={len(rows)} depth={depth}"]
    for lvl, lo, hi in rows:
        coords = [f"{lo[0]:.17g} {hi[0]:.17g}"]
        coords.extend(f"{lo[a]:.17g} {hi[a]:.17g}" for a in range(1, len(lo)))
        lines.append(f"{lvl} " + " ".join(coords))
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w") as fh:
            fh.write(text)
