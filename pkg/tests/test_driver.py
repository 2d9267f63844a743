"""Outer-loop orchestration: both methods, slicing, indicator series."""

import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

import porowave.driver as drv
from porowave.chebyshev import cheb_interpolate
from porowave.driver import (ToleranceSet, adaptive_tolerances, audit_sliced,
                             contraction_audit, estimate_c_L, full_method,
                             fully_adaptive_method, relative_indicators,
                             run_sliced, update_lipschitz)
from porowave.fields import SpatialData, TimeConstant
from porowave.lsq import BudgetError, NonContractionError
from porowave.mesh import Cylinder, uniform_mesh
from porowave.model import ModelSpec, SigmaSpec
from porowave.porosity import product_stack, tnorm_diff

DEC = SigmaSpec(1.0, 12 / 25, 1 / 25)
DOM = ((0.0, 1.0),)
CYL = Cylinder(0.0, 1.0, (0.0,), (1.0,))


def step_phi0():
    return SpatialData.step_1d(DOM, [Fraction(1, 4), Fraction(3, 4)],
                               [0.1, 0.2, 0.1])


def coupled_model(sigma=DEC):
    return ModelSpec(domain=DOM, T=1.0, Q=1.0, m=1.0, c_phi=1.0, sigma=sigma,
                     form="small_porosity")


class TestToleranceSet:
    def test_defaults_are_valid(self):
        t = ToleranceSet(tol_phi=1e-4)
        assert t.theta == 0.5 and t.rho_u == 0.2
        assert t.tol_proj is None

    def test_rejects_nonpositive_tolerance(self):
        with pytest.raises(ValueError, match="tol_phi"):
            ToleranceSet(tol_phi=0.0)
        with pytest.raises(ValueError, match="tol_proj"):
            ToleranceSet(tol_phi=1e-4, tol_proj=-1e-6)

    def test_rejects_out_of_range_factors(self):
        with pytest.raises(ValueError, match="theta"):
            ToleranceSet(tol_phi=1e-4, theta=1.0)
        with pytest.raises(ValueError, match="lambda_Theta"):
            ToleranceSet(tol_phi=1e-4, lambda_Theta_init=0.0)

    def test_rejects_lsq_above_u(self):
        with pytest.raises(ValueError, match="tol_lsq"):
            ToleranceSet(tol_phi=1e-4, tol_u=1e-5, tol_lsq=1e-4)


class TestAdaptiveTolerances:
    def test_worked_example(self):
        tol_u, tol_proj = adaptive_tolerances(1.0, 3 / 5, 0.5, 0.5, 1.0, 1.0,
                                              1.0)
        assert tol_u == pytest.approx(0.05, rel=1e-15)
        assert tol_proj == pytest.approx(0.1, rel=1e-15)

    def test_proportional_in_residual(self):
        a = adaptive_tolerances(1.0, 0.6, 0.5, 0.5, 1.0, 1.0, 1.0)
        b = adaptive_tolerances(1e-3, 0.6, 0.5, 0.5, 1.0, 1.0, 1.0)
        assert b[0] == pytest.approx(1e-3 * a[0], rel=1e-14)
        assert b[1] == pytest.approx(1e-3 * a[1], rel=1e-14)

    def test_vanishes_as_lambda_approaches_one(self):
        tol_u, tol_proj = adaptive_tolerances(1.0, 1 - 1e-9, 0.5, 0.5, 1.0,
                                              1.0, 1.0)
        assert tol_u < 1e-9 and tol_proj < 1e-9


class TestUpdateLipschitz:
    def test_takes_smaller_ratio(self):
        assert update_lipschitz(0.6, 0.5, 1.0) == 0.5

    def test_keeps_init_when_ratio_larger(self):
        assert update_lipschitz(0.6, 0.9, 1.0) == 0.6
        assert update_lipschitz(0.6, 1.2, 1.0) == 0.6

    def test_rejects_zero_old_residual(self):
        with pytest.raises(ValueError):
            update_lipschitz(0.6, 0.5, 0.0)


class TestEstimateCL:
    def test_constant_sigma_is_inverse_c0(self):
        model = coupled_model(SigmaSpec(2.0, 0.0, 1.0))
        assert estimate_c_L(model) == 0.5

    def test_decompaction_exceeds_tail_limit(self):
        c = estimate_c_L(coupled_model())
        assert c >= 25.0  # 1 / sigma(-inf) for c1 = 12/25
        assert c == pytest.approx(38.46, rel=1e-2)

    def test_range_restriction(self):
        model = coupled_model()
        # degenerate range at 0: kappa'(0) = 1 / sigma(0)
        assert estimate_c_L(model, (0.0, 0.0)) == \
            pytest.approx(25 / 13, rel=1e-12)
        assert estimate_c_L(model, (-1.0, 1.0)) <= estimate_c_L(model)


class TestFullMethod:
    def test_decoupled_viscous_converges_immediately(self):
        model = ModelSpec(domain=DOM, T=1.0, Q=0.0, m=1.0, c_phi=1.0,
                          sigma=SigmaSpec(1.0, 0.0, 1.0), f=(0.0,),
                          form="viscous_limit")
        tols = ToleranceSet(tol_phi=1e-8, tol_proj=1e-9, tol_u=1e-8,
                            tol_lsq=1e-9)
        res = full_method(model, step_phi0(), None, tols,
                          uniform_mesh(CYL, 2, (4,)))
        assert res.outer_iterations == 1
        assert res.state.u.norm2() == 0.0
        assert res.records[0].res_phi <= 1e-8

    def test_coupled_run_contracts(self):
        tols = ToleranceSet(tol_phi=2e-3, tol_proj=2e-4, tol_u=1e-3,
                            tol_lsq=5e-4)
        res = full_method(coupled_model(), step_phi0(), None, tols,
                          uniform_mesh(CYL, 2, (4,)))
        seq = [r.res_phi for r in res.records]
        assert seq[-1] <= tols.tol_phi
        assert all(b < a for a, b in zip(seq, seq[1:]))
        audit = contraction_audit(res)
        assert audit["geomean"] < 1.0
        # tolerance ledger: every inner loop ended below its target
        for r in res.records:
            assert r.res_u <= r.tol_u
        keys = {"outer_k", "inner_l", "res_u", "dofs", "leaves"}
        assert all(set(row) == keys for row in res.rows)

    def test_deterministic(self):
        tols = ToleranceSet(tol_phi=5e-3, tol_proj=5e-4, tol_u=2e-3,
                            tol_lsq=1e-3)
        runs = [full_method(coupled_model(), step_phi0(), None, tols,
                            uniform_mesh(CYL, 2, (2,))) for _ in range(2)]
        assert [r.res_phi for r in runs[0].records] == \
            [r.res_phi for r in runs[1].records]
        assert runs[0].rows == runs[1].rows

    def test_requires_fixed_tolerances(self):
        with pytest.raises(ValueError, match="tol_proj"):
            full_method(coupled_model(), step_phi0(), None,
                        ToleranceSet(tol_phi=1e-3),
                        uniform_mesh(CYL, 2, (2,)))

    def test_outer_budget(self):
        tols = ToleranceSet(tol_phi=1e-9, tol_proj=5e-4, tol_u=2e-3,
                            tol_lsq=1e-3)
        with pytest.raises(BudgetError, match="outer iteration"):
            full_method(coupled_model(), step_phi0(), None, tols,
                        uniform_mesh(CYL, 2, (2,)), max_outer=1)


class TestFullyAdaptive:
    def test_tolerances_follow_the_schedule(self):
        tols = ToleranceSet(tol_phi=5e-3, c_L=1.0)
        res = fully_adaptive_method(coupled_model(), step_phi0(), None, tols,
                                    uniform_mesh(CYL, 2, (2,)))
        assert res.records[-1].res_phi <= tols.tol_phi
        # replay the schedule: each record's tolerances derive from the
        # previous reported residual through the printed formulas
        res_phi = tols.tol_phi + 1.0
        for r in res.records:
            tol_u, tol_proj = adaptive_tolerances(
                res_phi, r.lambda_Theta, tols.rho_phi, tols.theta, 1.0, 1.0,
                1.0)
            assert r.tol_u == pytest.approx(tol_u, rel=1e-14)
            assert r.tol_proj == pytest.approx(tol_proj, rel=1e-14)
            assert r.res_u <= r.tol_u
            res_phi = r.res_phi
        # reported residual is the scaled step length
        for r in res.records:
            assert r.res_phi == pytest.approx(
                r.lambda_Theta / (1 - r.lambda_Theta) * r.diff_T, rel=1e-14)

    def test_lipschitz_update_clamps_lambda(self):
        tols = ToleranceSet(tol_phi=1e-2, c_L=1.0,
                            lipschitz_update_enabled=True,
                            warmup_iterations=1)
        res = fully_adaptive_method(coupled_model(), step_phi0(), None, tols,
                                    uniform_mesh(CYL, 2, (2,)))
        lams = [r.lambda_Theta for r in res.records]
        assert all(v <= tols.lambda_Theta_init + 1e-15 for v in lams)
        assert res.records[-1].res_phi <= tols.tol_phi


@pytest.fixture(scope="module")
def run():
    tols = ToleranceSet(tol_phi=2e-3, tol_proj=2e-4, tol_u=1e-3,
                        tol_lsq=5e-4)
    return full_method(coupled_model(), step_phi0(), None, tols,
                       uniform_mesh(CYL, 2, (4,)))


class TestIndicators:
    def test_series_shapes_and_signs(self, run):
        rel_phi, rel_u = relative_indicators(run)
        n = run.outer_iterations
        assert len(rel_phi) == n and len(rel_u) == n
        assert all(v > 0 for v in rel_phi + rel_u)
        assert all(b < a * 1.05 for a, b in zip(rel_u, rel_u[1:]))

    def test_rel_phi_matches_norm_ratio(self, run):
        rel_phi, _ = relative_indicators(run)
        first = run.records[0]
        direct = tnorm_diff(first.phi,
                            TimeConstant(run.phi0, CYL.bounds[0]))
        assert rel_phi[0] == pytest.approx(direct / first.phi_norm_T,
                                           rel=1e-12)

    def test_audit_matches_hand_geomean(self, run):
        audit = contraction_audit(run)
        diffs = [r.diff_T for r in run.records]
        hand = [b / a for a, b in zip(diffs, diffs[1:])]
        assert audit["ratios"] == pytest.approx(hand)
        assert audit["geomean"] == pytest.approx(
            math.exp(np.mean(np.log(hand))), rel=1e-12)


class TestRunSliced:
    def test_single_slice_equals_unsliced(self):
        tols = ToleranceSet(tol_phi=5e-3, tol_proj=5e-4, tol_u=2e-3,
                            tol_lsq=1e-3)
        run = run_sliced(coupled_model(), step_phi0(), None, tols, 1,
                         (2, (2,)), mode="full")
        direct = full_method(coupled_model(), step_phi0(), None, tols,
                             uniform_mesh(CYL, 2, (2,)))
        assert len(run.slices) == 1
        assert [r.res_phi for r in run.slices[0].result.records] == \
            [r.res_phi for r in direct.records]

    def test_two_slices_hand_off_traces(self):
        tols = ToleranceSet(tol_phi=5e-3, tol_proj=5e-4, tol_u=2e-3,
                            tol_lsq=1e-3)
        run = run_sliced(coupled_model(), step_phi0(), None, tols, 2,
                         (1, (2,)), mode="full")
        assert [s.t_span for s in run.slices] == [(0.0, 0.5), (0.5, 1.0)]
        # hand-off is the identical object, so continuity is exact
        assert run.slices[1].result.phi0 is run.slices[0].phi_trace
        assert run.slices[1].result.u0 is run.slices[0].u_trace
        assert audit_sliced(run)["geomean"] < 1.0
        # budget ledger follows the printed accumulation with C = 1
        b0, b1 = run.budget
        t_u0 = run.slices[0].result.records[-1].tol_u
        assert b0["eps_phi"] == pytest.approx(tols.tol_phi)
        assert b0["eps_u"] == pytest.approx(
            math.sqrt(0.5) * tols.tol_phi + t_u0)
        assert b1["eps_phi"] == pytest.approx(
            b0["eps_phi"] + b0["eps_u"] + tols.tol_phi)

    def test_validation(self):
        tols = ToleranceSet(tol_phi=1e-3)
        with pytest.raises(ValueError, match="slice"):
            run_sliced(coupled_model(), step_phi0(), None, tols, 0, (1, (2,)))
        with pytest.raises(ValueError, match="mode"):
            run_sliced(coupled_model(), step_phi0(), None, tols, 1, (1, (2,)),
                       mode="bogus")

    def test_halving_restart_on_non_contraction(self, monkeypatch):
        calls = []

        def fake_method(model, phi0, u0, tols, mesh0, **kw):
            cyl = mesh0.cylinder
            span = cyl.t1 - cyl.t0
            calls.append((cyl.t0, cyl.t1))
            if span > 0.26:
                raise NonContractionError("slice too long", state=None,
                                          history=[])
            ps = product_stack(uniform_mesh(cyl, 1, (1,)))
            f = cheb_interpolate(lambda p: np.full(len(p), 0.5),
                                 ps, 2).to_field()
            rec = SimpleNamespace(tol_u=1e-3, diff_T=0.0)
            return SimpleNamespace(phi=f, state=SimpleNamespace(u=f),
                                   records=[rec], phi0=phi0, u0=u0)

        monkeypatch.setattr(drv, "full_method", fake_method)
        tols = ToleranceSet(tol_phi=1e-3)
        run = run_sliced(coupled_model(), step_phi0(), None, tols, 1,
                         (1, (1,)), mode="full")
        assert [s.t_span for s in run.slices] == [
            (0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)]

        # exhausted halving budget re-raises
        calls.clear()
        with pytest.raises(NonContractionError):
            run_sliced(coupled_model(), step_phi0(), None, tols, 1,
                       (1, (1,)), mode="full", max_halvings=1)
