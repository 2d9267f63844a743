"""Gauss rules: exactness against symbolic antiderivatives."""

import numpy as np
import pytest
import sympy as sp

from porowave import quadrature as pq


def test_midpoint_rule():
    x, w = pq.gauss(1)
    assert x == pytest.approx([0.5])
    assert w == pytest.approx([1.0])


def test_two_point_integrates_x2():
    x, w = pq.gauss(2)
    assert float(w @ x**2) == pytest.approx(1 / 3, abs=1e-16)


def test_degree7_tensor_poly_vs_sympy():
    rng = np.random.default_rng(7)
    c = rng.standard_normal((8, 8))
    xs, ts = sp.symbols("x t")
    poly = sum(
        sp.Rational(int(1000 * c[i, j]), 1000) * xs**i * ts**j
        for i in range(8)
        for j in range(8)
    )
    exact = float(sp.integrate(sp.integrate(poly, (xs, 0, 1)), (ts, 0, 1)))
    pts, w = pq.tensor_rule((4, 4))
    vals = np.zeros(len(pts))
    cq = np.vectorize(lambda i, j: float(sp.Rational(int(1000 * c[i, j]), 1000)))(
        *np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    )
    for i in range(8):
        for j in range(8):
            vals += cq[i, j] * pts[:, 0] ** i * pts[:, 1] ** j
    assert float(w @ vals) == pytest.approx(exact, abs=1e-14)


def test_weights_sum_to_measure():
    pts, w = pq.tensor_rule((3, 2, 4), boxes=[(0, 2), (1, 1.5), (-1, 1)])
    assert w.sum() == pytest.approx(2 * 0.5 * 2, rel=1e-14)
    assert pts.shape == (24, 3)


def test_lobatto_nodes():
    assert pq.lobatto(2) == pytest.approx([0.0, 1.0])
    n4 = pq.lobatto(4)
    # interior nodes of the 4-point rule sit at +-1/sqrt(5) on [-1, 1]
    assert n4 == pytest.approx(
        [0.0, 0.5 - 0.5 / np.sqrt(5), 0.5 + 0.5 / np.sqrt(5), 1.0], abs=1e-14
    )
    n5 = pq.lobatto(5)
    assert n5 == pytest.approx(
        [0.0, 0.5 - 0.5 * np.sqrt(3 / 7), 0.5, 0.5 + 0.5 * np.sqrt(3 / 7), 1.0],
        abs=1e-14,
    )


def test_n_for_degree():
    assert pq.n_for_degree(0) == 1
    assert pq.n_for_degree(3) == 2
    assert pq.n_for_degree(7) == 4
