"""Porosity update pipeline: time integration, T-norm projection, Picard step."""

import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest
import sympy as sp

from porowave.chebyshev import cheb_interpolate
from porowave.fields import (CallableField, LegendreField, SpatialData,
                             TimeConstant, TreeBackend)
from porowave.lsq import BudgetError
from porowave.mesh import Cylinder, uniform_mesh
from porowave.model import ModelSpec, SigmaSpec, to_log_porosity
from porowave.porosity import (UnphysicalPorosityWarning, _cell_best,
                               _time_integration_matrix, integrate_in_time,
                               porosity_range, porosity_step, product_stack,
                               project_Tnorm, refine_product, tnorm,
                               tnorm_diff, tnorm_terms)

CYL1 = Cylinder(0.0, 1.0, (0.0,), (1.0,))
CYL3 = Cylinder(0.0, 1.0, (0.0,), (3.0,))
SIGMA_ONE = SigmaSpec(1.0, 0.0, 1.0)


def st_const(value, cyl=CYL1):
    return TimeConstant(SpatialData.constant(cyl.bounds[1:], value),
                        cyl.bounds[0])


class TestTimeIntegration:
    def test_integration_matrix_matches_symbolic(self):
        """T[j,k] reproduces the symbolic antiderivative of the basis."""
        s = sp.Symbol("s")
        for n in (2, 4, 6):
            T = _time_integration_matrix(n)
            for k in range(n):
                phi_k = sp.sqrt(2 * k + 1) * sp.legendre(k, 2 * s - 1)
                anti = sp.integrate(phi_k, (s, 0, s))
                recon = sum(
                    T[j, k] * sp.sqrt(2 * j + 1) * sp.legendre(j, 2 * s - 1)
                    for j in range(n + 1))
                diff = sp.expand(anti - recon)
                for sv in (0, sp.Rational(1, 3), sp.Rational(7, 8), 1):
                    assert abs(float(diff.subs(s, sv))) < 1e-13

    def test_constant_integrates_to_t(self):
        ps = product_stack(uniform_mesh(CYL1, 2, (2,)))
        g = cheb_interpolate(lambda p: np.ones(len(p)), ps, 2).to_field()
        G = integrate_in_time(g)
        pts = np.random.default_rng(0).uniform(0.01, 0.99, (40, 2))
        assert np.max(np.abs(G.eval_abs(pts) - pts[:, 0])) < 1e-14
        at0 = G.eval_abs(np.array([[0.0, 0.3], [0.0, 0.8]]))
        assert np.max(np.abs(at0)) < 1e-14

    def test_linear_integrates_to_t_squared(self):
        ps = product_stack(uniform_mesh(CYL1, 2, (2,)))
        g = cheb_interpolate(lambda p: 2 * p[:, 0], ps, 3).to_field()
        G = integrate_in_time(g)
        pts = np.random.default_rng(1).uniform(0.01, 0.99, (40, 2))
        assert np.max(np.abs(G.eval_abs(pts) - pts[:, 0] ** 2)) < 1e-13

    def test_cubic_matches_symbolic_antiderivative(self):
        """Random bivariate cubic against its exact cumulative integral."""
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 3))

        def f(p):
            return sum(a[i, j] * p[:, 0] ** i * p[:, 1] ** j
                       for i in range(4) for j in range(3))

        def F(p):
            return sum(a[i, j] * p[:, 0] ** (i + 1) / (i + 1) * p[:, 1] ** j
                       for i in range(4) for j in range(3))

        ps = product_stack(uniform_mesh(CYL1, 2, (3,)).refine([(0, 0, (1,))]))
        G = integrate_in_time(cheb_interpolate(f, ps, 5).to_field())
        pts = rng.uniform(0.01, 0.99, (60, 2))
        assert np.max(np.abs(G.eval_abs(pts) - F(pts))) < 1e-13

    def test_rejects_tree_backed_fields(self):
        mesh = uniform_mesh(CYL1, 2, (2,))
        field = LegendreField(CYL1.bounds, TreeBackend(mesh),
                              [np.ones((1, 1))] * len(mesh.leaves))
        with pytest.raises(ValueError, match="product"):
            integrate_in_time(field)


class TestProductStack:
    def test_columns_span_all_atoms(self):
        mesh = uniform_mesh(CYL1, 2, (2,)).refine([(0, 1, (1,))])
        ps = product_stack(mesh)
        skeys = {c[0] for c in ps.cells}
        n_atoms = len(ps.cuts) - 1
        assert len(ps.cells) == len(skeys) * n_atoms
        assert ps.measure() == pytest.approx(1.0, abs=1e-14)

    def test_refinement_keeps_product_shape(self):
        ps = product_stack(uniform_mesh(CYL1, 1, (1,)))
        ps2 = refine_product(ps, [0])
        skeys = {c[0] for c in ps2.cells}
        assert len(ps2.cuts) == 3
        assert len(ps2.cells) == len(skeys) * (len(ps2.cuts) - 1)
        assert ps2.measure() == pytest.approx(1.0, abs=1e-14)

    def test_idempotent_when_time_uniform(self):
        ps = product_stack(uniform_mesh(CYL1, 4, (2,)))
        assert len(ps.cuts) == 5
        assert len(ps.cells) == 8


class TestTnorm:
    def test_constant_has_norm_sqrt2(self):
        assert tnorm(st_const(1.0)) == pytest.approx(math.sqrt(2), rel=1e-14)

    def test_linear_in_time_oracle(self):
        """f = t: volume 1/3 plus terminal trace 1."""
        f = CallableField(CYL1.bounds, lambda p: p[:, 0], degs=(1, 0))
        assert tnorm_terms(CYL1.bounds, [(1.0, f)]) == pytest.approx(
            math.sqrt(4 / 3), rel=1e-13)

    def test_diff_of_identical_fields_vanishes(self):
        f = st_const(0.7)
        assert tnorm_diff(f, f) < 1e-14

    def test_cross_mesh_difference(self):
        """Same function on different meshes has zero distance."""
        ps_a = product_stack(uniform_mesh(CYL1, 1, (1,)))
        ps_b = product_stack(uniform_mesh(CYL1, 2, (3,)))
        fa = cheb_interpolate(lambda p: p[:, 0] * p[:, 1], ps_a, 3).to_field()
        fb = cheb_interpolate(lambda p: p[:, 0] * p[:, 1], ps_b, 3).to_field()
        assert tnorm_diff(fa, fb) < 1e-13


def misaligned_step_terms():
    """Step at x = 1/2 on (0, 3): never on a dyadic mesh line."""
    data = SpatialData.step_1d(CYL3.bounds[1:], [Fraction(1, 6)], [0.1, 0.2])
    return [(1.0, TimeConstant(data, CYL3.bounds[0]))]


def uniform_level(cyl, level):
    mesh = uniform_mesh(cyl, 1, (1,))
    for _ in range(level):
        mesh = mesh.refine(mesh.leaves)
    return mesh


class TestProjection:
    def test_member_of_space_is_reproduced(self):
        ps = product_stack(uniform_mesh(CYL1, 2, (2,)))
        f = cheb_interpolate(lambda p: p[:, 0] ** 2 * p[:, 1], ps, 4).to_field()
        # the error certificate is a difference of O(||f||^2) quantities,
        # so it bottoms out near sqrt(eps); 1e-6 sits safely above that
        res = project_Tnorm([(1.0, f)], uniform_mesh(CYL1, 2, (2,)), 1e-6, m=3)
        assert res.error < 1e-6
        assert res.rounds == 0
        pts = np.random.default_rng(2).uniform(0.01, 0.99, (40, 2))
        assert np.max(np.abs(res.field.eval_abs(pts) - f.eval_abs(pts))) < 1e-12

    def test_pythagoras(self):
        """Orthogonal split ||f - Pf||^2 + ||Pf||^2 = ||f||^2 in the T-norm."""
        f = CallableField(CYL1.bounds,
                          lambda p: np.sin(2 * p[:, 0]) * np.exp(p[:, 1]))
        res = project_Tnorm([(1.0, f)], uniform_mesh(CYL1, 2, (2,)), 2e-3,
                            m=2, smooth_n=12)
        nf2 = tnorm_terms(CYL1.bounds, [(1.0, f)], smooth_n=12) ** 2
        np2 = tnorm(res.field, smooth_n=12) ** 2
        nd2 = tnorm_terms(CYL1.bounds, [(1.0, f), (-1.0, res.field)],
                          smooth_n=12) ** 2
        assert nd2 + np2 == pytest.approx(nf2, rel=1e-10)
        # the certified error is the measured distance
        assert res.error == pytest.approx(math.sqrt(nd2), rel=1e-8)

    def test_misaligned_step_error_sequence(self):
        """Squared error halves per uniform level, matching hand formulas."""
        terms = misaligned_step_terms()
        errs = []
        for level in range(1, 5):
            res = project_Tnorm(terms, uniform_level(CYL3, level), 1e99, m=0)
            errs.append(res.error)
            # hand oracle: only the time column straddling x = 1/2
            # contributes; the top cell solves the trace-augmented system
            d, wx, h_t = 0.1, 3.0 / 2**level, 1.0 / 2**level
            A = math.floor(0.5 / wx) * wx
            w0, w1 = 0.5 - A, A + wx - 0.5
            ex2 = d * d * w0 * w1 / wx
            vol = h_t * wx
            f2 = (0.1**2 * w0 + 0.2**2 * w1) * (h_t + 1.0)
            rhs = (0.1 * w0 + 0.2 * w1) * (h_t + 1.0) / math.sqrt(vol)
            top_err2 = f2 - rhs * rhs / (1.0 + 1.0 / h_t)
            exact = math.sqrt(ex2 * (1.0 - h_t) + top_err2)
            assert res.error == pytest.approx(exact, rel=1e-12)
        for a, b in zip(errs, errs[1:]):
            assert 0.65 < b / a < 0.75  # error^2 halves per level

    def test_greedy_close_to_enumerated_optimum(self):
        """Single-worst-cell greedy vs exhaustive trees of depth <= 3."""
        terms = misaligned_step_terms()
        mesh0 = uniform_mesh(CYL3, 1, (1,))
        bounds = CYL3.bounds
        shape = (1, 1)

        err_cache = {}

        def cell_err2(mesh, key):
            if key not in err_cache:
                err_cache[key] = _cell_best(bounds, mesh.rel_box(key), terms,
                                            shape, 10)[1]
            return err_cache[key]

        # DP over trees: best total err^2 using exactly n leaves under key
        from functools import lru_cache

        probe = {0: mesh0}
        for lvl in range(1, 4):
            probe[lvl] = probe[lvl - 1].refine(probe[lvl - 1].leaves)

        @lru_cache(maxsize=None)
        def best(key, n_leaves):
            lvl = key[0]
            leaf = cell_err2(probe[lvl], key)
            if n_leaves == 1:
                return leaf
            if lvl >= 3:
                return math.inf
            kids = probe[lvl].children(key)
            # distribute the leaf budget over the four children
            table = {1: None}
            opts = [dict() for _ in kids]
            for ci, kid in enumerate(kids):
                for n in range(1, n_leaves - len(kids) + 2):
                    opts[ci][n] = best(kid, n)
            cur = {0: 0.0}
            for ci in range(len(kids)):
                nxt = {}
                for used, acc in cur.items():
                    for n, v in opts[ci].items():
                        t = used + n
                        if t <= n_leaves and v < math.inf:
                            if t not in nxt or acc + v < nxt[t]:
                                nxt[t] = acc + v
                cur = nxt
            return cur.get(n_leaves, math.inf)

        res = project_Tnorm(terms, mesh0, 0.018, m=0, near_best_single=True,
                            max_rounds=60)
        assert res.trail[-1][1] <= 0.018
        checked = 0
        for leaves, err in res.trail:
            if leaves > 10:  # single marking: <= 10 leaves means depth <= 3
                continue
            dp = math.sqrt(best((0, 0, (0,)), leaves))
            assert err <= 2.0 * dp + 1e-14
            checked += 1
        assert checked >= 4

    def test_budget_exhaustion(self):
        with pytest.raises(BudgetError, match="projection budget"):
            project_Tnorm(misaligned_step_terms(), uniform_mesh(CYL3, 1, (1,)),
                          1e-9, m=0, max_rounds=2)

    def test_nonpositive_tolerance_rejected(self):
        with pytest.raises(ValueError, match="tol"):
            project_Tnorm(misaligned_step_terms(),
                          uniform_mesh(CYL3, 1, (1,)), 0.0)


class TestPorosityStep:
    def small_model(self, q=0.1):
        return ModelSpec(domain=((0.0, 1.0),), T=1.0, Q=q, m=1.0, c_phi=1.0,
                         sigma=SIGMA_ONE, form="small_porosity")

    def test_closed_form_affine_update(self):
        """Constant states: target phi0 - Q(u - u0) - phi * u * t exactly."""
        model = self.small_model()
        state = SimpleNamespace(u=st_const(0.2),
                                mesh=uniform_mesh(CYL1, 2, (2,)))
        res = porosity_step(model, st_const(0.1), state,
                            SpatialData.constant(CYL1.bounds[1:], 0.1),
                            SpatialData.constant(CYL1.bounds[1:], 0.1),
                            tol_proj=1e-8, tol_int=1e-8)
        pts = np.random.default_rng(4).uniform(0.01, 0.99, (40, 2))
        exact = 0.1 - 0.1 * (0.2 - 0.1) - 0.1 * 0.2 * pts[:, 0]
        assert np.max(np.abs(res.phi.eval_abs(pts) - exact)) < 1e-13
        assert res.projection_error < 1e-8

    def test_log_form_runs_in_log_variable(self):
        model = ModelSpec(domain=((0.0, 1.0),), T=1.0, Q=0.1, m=1.0,
                          c_phi=1.0, sigma=SIGMA_ONE, form="log_transformed")
        w = float(to_log_porosity(0.1))
        state = SimpleNamespace(u=st_const(0.2),
                                mesh=uniform_mesh(CYL1, 2, (2,)))
        res = porosity_step(model, st_const(w), state,
                            SpatialData.constant(CYL1.bounds[1:], w),
                            SpatialData.constant(CYL1.bounds[1:], 0.1),
                            tol_proj=1e-8, tol_int=1e-8)
        pts = np.random.default_rng(5).uniform(0.01, 0.99, (30, 2))
        # beta in the log variable equals phi^m, so the integrand matches
        # the plain form at the corresponding porosity
        exact = w - 0.1 * (0.2 - 0.1) - 0.1 * 0.2 * pts[:, 0]
        assert np.max(np.abs(res.phi.eval_abs(pts) - exact)) < 1e-13

    def test_vanishing_integrand_returns_projected_initial(self):
        """u = 0 makes kappa vanish; the update is the projected phi0."""
        model = ModelSpec(domain=((0.0, 1.0),), T=1.0, Q=0.0, m=2.0,
                          c_phi=1.0, sigma=SIGMA_ONE, form="viscous_limit")
        phi0 = SpatialData.step_1d(CYL1.bounds[1:], [Fraction(1, 2)],
                                   [0.1, 0.2])
        state = SimpleNamespace(u=st_const(0.0),
                                mesh=uniform_mesh(CYL1, 2, (2,)))
        res = porosity_step(model, TimeConstant(phi0, CYL1.bounds[0]), state,
                            phi0, None, tol_proj=1e-8, tol_int=1e-10)
        pts = np.random.default_rng(6).uniform(0.01, 0.99, (40, 2))
        exact = np.where(pts[:, 1] <= 0.5, 0.1, 0.2)
        assert np.max(np.abs(res.phi.eval_abs(pts) - exact)) < 1e-13

    def test_unphysical_output_warns(self):
        model = self.small_model(q=1.0)
        state = SimpleNamespace(u=st_const(-0.5),
                                mesh=uniform_mesh(CYL1, 1, (1,)))
        with pytest.warns(UnphysicalPorosityWarning):
            porosity_step(model, st_const(0.95), state,
                          SpatialData.constant(CYL1.bounds[1:], 0.95),
                          SpatialData.constant(CYL1.bounds[1:], 0.0),
                          tol_proj=1e-8, tol_int=1e-8)

    def test_sharp_kappa_triggers_cell_refinement(self):
        """Steep kappa pushes the bound over the order cap; cells split."""
        sig = SigmaSpec(1.0, 12 / 25, 1 / 25)
        model = ModelSpec(domain=((0.0, 1.0),), T=1.0, Q=1.0, m=2.0,
                          c_phi=1.0, sigma=sig, form="small_porosity")
        u = TimeConstant(SpatialData(CYL1.bounds[1:], [
            (((Fraction(0), Fraction(1)),),
             ("fn", lambda p: 0.05 * np.tanh(15 * (p[:, 0] - 0.37)))),
        ]), CYL1.bounds[0])
        state = SimpleNamespace(u=u, mesh=uniform_mesh(CYL1, 1, (1,)))
        res = porosity_step(model, st_const(0.15), state,
                            SpatialData.constant(CYL1.bounds[1:], 0.15),
                            SpatialData.constant(CYL1.bounds[1:], 0.0),
                            tol_proj=1e-5, tol_int=1e-7)
        assert res.interpolation_rounds >= 1
        assert res.interpolation_bound <= 1e-7

    def test_missing_initial_pressure_rejected(self):
        model = self.small_model()
        state = SimpleNamespace(u=st_const(0.1),
                                mesh=uniform_mesh(CYL1, 1, (1,)))
        with pytest.raises(ValueError, match="u0"):
            porosity_step(model, st_const(0.1), state,
                          SpatialData.constant(CYL1.bounds[1:], 0.1), None,
                          tol_proj=1e-8, tol_int=1e-8)

    def test_porosity_range_maps_log_state(self):
        model = ModelSpec(domain=((0.0, 1.0),), T=1.0, Q=1.0, m=1.0,
                          c_phi=1.0, sigma=SIGMA_ONE, form="log_transformed")
        ps = product_stack(uniform_mesh(CYL1, 1, (1,)))
        w = float(to_log_porosity(0.3))
        field = cheb_interpolate(lambda p: np.full(len(p), w), ps, 2).to_field()
        lo, hi = porosity_range(model, field)
        assert lo == pytest.approx(0.3, abs=1e-12)
        assert hi == pytest.approx(0.3, abs=1e-12)
