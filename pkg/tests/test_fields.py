"""Field algebra: Legendre cells, piece refinement, exact box integrals."""

from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from scipy.special import eval_legendre

from porowave import fields as pf
from porowave import mesh as pmesh

UNIT = pmesh.Cylinder(0.0, 1.0, (0.0,), (1.0,))
B2 = [(0.0, 1.0), (0.0, 1.0)]
UBOX = (pf.UNIT, pf.UNIT)


def mesh_left():
    return pmesh.uniform_mesh(UNIT, 1, (1,)).refine([(0, 0, (0,))]).refine([(1, 0, (0,))])


def mesh_right():
    return pmesh.uniform_mesh(UNIT, 1, (1,)).refine([(0, 0, (0,))]).refine([(1, 1, (1,))])


def poly_field(mesh, expr_fn, shape):
    return pf.project_function(B2, pf.TreeBackend(mesh), shape, expr_fn, smooth_n=10)


def test_eval_matches_independent_basis_oracle():
    rng = np.random.default_rng(5)
    m = mesh_left()
    backend = pf.TreeBackend(m)
    coeffs = [rng.standard_normal((3, 4)) for _ in range(backend.n_cells())]
    f = pf.LegendreField(B2, backend, coeffs)
    pts = rng.uniform(0.02, 0.98, size=(40, 2))
    got = f.eval_abs(pts)
    # oracle: locate by brute force, evaluate sum of scaled Legendre products
    for p, val in zip(pts, got):
        owner = None
        for i in range(backend.n_cells()):
            rb = backend.rel_box(i)
            if all(float(rb[a][0]) < p[a] <= float(rb[a][1]) for a in range(2)):
                owner = i
                break
        lo, hi = pf.abs_box(B2, backend.rel_box(owner))
        s = (p - lo) / (hi - lo)
        acc = 0.0
        for i in range(3):
            for j in range(4):
                acc += (
                    coeffs[owner][i, j]
                    * np.sqrt(2 * i + 1) * eval_legendre(i, 2 * s[0] - 1)
                    * np.sqrt(2 * j + 1) * eval_legendre(j, 2 * s[1] - 1)
                )
        acc /= np.sqrt(np.prod(hi - lo))
        assert val == pytest.approx(acc, rel=1e-12, abs=1e-12)


def test_polynomial_projection_reproduces():
    f = poly_field(mesh_left(), lambda p: p[:, 0] ** 2 * p[:, 1], (3, 2))
    pts = np.random.default_rng(0).uniform(0, 1, size=(50, 2))
    assert f.eval_abs(pts) == pytest.approx(pts[:, 0] ** 2 * pts[:, 1], abs=1e-13)


def test_norm2_is_sum_of_squares():
    f = poly_field(mesh_left(), lambda p: p[:, 0] ** 2 * p[:, 1], (3, 2))
    t, x = sp.symbols("t x")
    exact = float(sp.integrate((t**2 * x) ** 2, (t, 0, 1), (x, 0, 1)))
    assert f.norm2() == pytest.approx(exact, rel=1e-13)
    assert pf.norm2_box(B2, UBOX, [(1.0, f)]) == pytest.approx(exact, rel=1e-13)


def test_cross_mesh_inner_product_exact():
    f = poly_field(mesh_left(), lambda p: p[:, 0] ** 2 * p[:, 1], (3, 2))
    g = poly_field(mesh_right(), lambda p: (1 - p[:, 0]) * p[:, 1] ** 2, (2, 3))
    # integral of t^2 x (1-t) x^2 = (1/3 - 1/4) * (1/4) = 1/48
    got = pf.inner_box(B2, UBOX, [(1.0, f)], [(1.0, g)])
    assert got == pytest.approx(1 / 48, rel=1e-13)


def test_cross_mesh_difference_norm():
    f = poly_field(mesh_left(), lambda p: p[:, 0] ** 2 * p[:, 1], (3, 2))
    g = poly_field(mesh_right(), lambda p: (1 - p[:, 0]) * p[:, 1] ** 2, (2, 3))
    t, x = sp.symbols("t x")
    exact = float(
        sp.integrate((t**2 * x - (1 - t) * x**2) ** 2, (t, 0, 1), (x, 0, 1))
    )
    got = pf.norm2_box(B2, UBOX, [(1.0, f), (-1.0, g)])
    assert got == pytest.approx(exact, rel=1e-13)


def test_gram_legendre_vs_sympy():
    f = poly_field(mesh_left(), lambda p: p[:, 0] ** 2 * p[:, 1], (3, 2))
    box = ((Fraction(0), Fraction(1, 2)), (Fraction(0), Fraction(1)))
    got = pf.gram_legendre(B2, box, [(1.0, f)], (3, 2))
    t, x = sp.symbols("t x")
    h = sp.Rational(1, 2)
    for i in range(3):
        for j in range(2):
            phi = (
                sp.sqrt(2 * i + 1) * sp.legendre(i, 2 * t / h - 1) / sp.sqrt(h)
                * sp.sqrt(2 * j + 1) * sp.legendre(j, 2 * x - 1)
            )
            exact = float(sp.integrate(t**2 * x * phi, (t, 0, h), (x, 0, 1)))
            assert got[i, j] == pytest.approx(exact, rel=1e-12, abs=1e-14)


def test_project_box_error_vs_sympy():
    cf = pf.CallableField(B2, lambda p: p[:, 0] ** 3, degs=(3, 0))
    c, err2 = pf.project_box(B2, UBOX, [(1.0, cf)], (3, 1))
    t, x = sp.symbols("t x")
    # best L2 approximation of t^3 by quadratics on (0,1): error^2 = 1/2800
    exact = sp.Rational(1, 2800)
    assert err2 == pytest.approx(float(exact), rel=1e-10)


def test_common_pieces_cover_box():
    f = poly_field(mesh_left(), lambda p: p[:, 0], (2, 1))
    g = poly_field(mesh_right(), lambda p: p[:, 1], (1, 2))
    box = ((Fraction(1, 8), Fraction(7, 8)), (Fraction(0), Fraction(3, 4)))
    pieces = pf.common_pieces(box, [f, g])
    total = sum(pf.box_measure_rel(sub) for sub, _ in pieces)
    assert total == pf.box_measure_rel(box)
    # pairwise disjoint
    subs = [sub for sub, _ in pieces]
    for i, a in enumerate(subs):
        for b in subs[i + 1 :]:
            assert pf.box_intersect(a, b) is None


def test_spatial_step_data():
    bounds = [(0.0, 3.0)]
    phi0 = pf.SpatialData.step_1d(bounds, [Fraction(1, 2)], [0.002, 0.001])
    pts = np.array([[0.3], [1.4], [1.6], [2.9]])
    assert phi0.eval_abs(pts) == pytest.approx([0.002, 0.002, 0.001, 0.001])
    assert phi0.breakpoints(0) == [Fraction(1, 2)]
    assert not phi0.is_zero()
    assert pf.SpatialData.constant(bounds, 0.0).is_zero()


def test_time_constant_wrapper():
    bounds = [(0.0, 3.0)]
    phi0 = pf.SpatialData.step_1d(bounds, [Fraction(1, 2)], [2.0, 1.0])
    f = pf.TimeConstant(phi0, (0.0, 5.0))
    pts = np.array([[0.1, 0.3], [4.9, 2.9]])
    assert f.eval_abs(pts) == pytest.approx([2.0, 1.0])
    # integral over the cylinder: 5 * (1.5*2 + 1.5*1)
    got = pf.norm2_box(f.bounds, UBOX, [(1.0, f)])
    assert got == pytest.approx(5 * (1.5 * 4 + 1.5 * 1), rel=1e-13)


def test_composed_field_degree_bookkeeping():
    f = poly_field(mesh_left(), lambda p: p[:, 0] + p[:, 1], (2, 2))
    sq = pf.ComposedField(f, lambda v: v**3, deg_multiplier=3)
    t, x = sp.symbols("t x")
    exact = float(sp.integrate(((t + x) ** 3) ** 2, (t, 0, 1), (x, 0, 1)))
    assert pf.norm2_box(B2, UBOX, [(1.0, sq)], smooth_n=2) == pytest.approx(
        exact, rel=1e-13
    )
    piece = sq.pieces_in(UBOX)[0]
    assert piece.degs == (3, 3)


def test_trace_pieces_and_norm():
    f = poly_field(mesh_left(), lambda p: p[:, 0] * p[:, 1] ** 2, (2, 3))
    tt = pf.trace_terms([(1.0, f)])
    got = pf.norm2_box([B2[1]], (pf.UNIT,), tt)
    assert got == pytest.approx(1 / 5, rel=1e-13)  # integral of x^4
    for p in f.trace_pieces():
        pts = np.linspace(float(p.box[0][0]) + 1e-3, float(p.box[0][1]) - 1e-3, 5)
        vals = p.eval(pts[:, None])
        assert vals == pytest.approx(pts**2, abs=1e-12)


def test_stack_partition():
    cols = [((Fraction(0), Fraction(1, 2)),), ((Fraction(1, 2), Fraction(1)),)]
    cuts = [Fraction(0), Fraction(1, 4), Fraction(1)]
    part = pf.StackPartition(cols, cuts)
    assert part.n_cells() == 4
    pts = np.array([[0.1, 0.2], [0.9, 0.8], [0.25, 0.5], [0.3, 0.6]])
    idx = part.locate_rel(pts)
    assert list(idx) == [0, 3, 0, 3]
    box = ((Fraction(0), Fraction(1, 4)), (Fraction(0), Fraction(1)))
    assert sorted(part.intersecting(box)) == [0, 2]
    f = pf.project_function(B2, part, (2, 2), lambda p: p[:, 0] * p[:, 1])
    q = np.random.default_rng(1).uniform(0, 1, size=(30, 2))
    assert f.eval_abs(q) == pytest.approx(q[:, 0] * q[:, 1], abs=1e-13)


def test_smooth_fallback_accuracy():
    cf = pf.CallableField(B2, lambda p: np.exp(p[:, 0] * p[:, 1]))
    got = pf.norm2_box(B2, UBOX, [(1.0, cf)], smooth_n=14)
    t, x = sp.symbols("t x")
    exact = float(sp.integrate(sp.exp(2 * t * x), (t, 0, 1), (x, 0, 1)))
    assert got == pytest.approx(exact, rel=1e-12)
