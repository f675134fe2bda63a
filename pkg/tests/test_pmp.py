import json

import numpy as np
import pytest

from bangsolve.euler import embed
from bangsolve.grid import Grid
from bangsolve.model import Polytope, example1, example1_solution, example1_switch_time
from bangsolve.pmp import (
    SwitchingConfig,
    analyze_switching,
    analyze_switching_samples,
    coercivity_constant_bound,
    pmp_residuals,
    robust_switching_margin,
)

ALPHA, BETA = 0.5, 2.0


@pytest.fixture(scope="module")
def prob():
    return example1(ALPHA, BETA)


@pytest.fixture(scope="module")
def sol():
    return example1_solution(ALPHA, BETA)


@pytest.fixture(scope="module")
def tau():
    return example1_switch_time(ALPHA, BETA)


def oracle_triple(sol, n):
    grid = Grid(n, 1.0)
    return embed(grid, sol.x(grid.nodes), sol.p(grid.nodes), sol.u(grid.nodes[:-1]))


class TestResiduals:
    def test_oracle_extremal_is_small(self, prob, sol):
        triple = oracle_triple(sol, 512)
        r_state, r_costate, r_stat = pmp_residuals(prob, triple)
        h = 1.0 / 512
        assert r_state <= 5 * h
        assert r_costate <= 5 * h
        assert r_stat <= 5 * h

    def test_flipped_control_raises_stationarity(self, prob, sol):
        grid = Grid(512, 1.0)
        u = sol.u(grid.nodes[:-1]).copy()
        flip = grid.nodes[:-1] <= 0.1
        u[flip] = 0.0  # wrong vertex where sigma < 0
        triple = embed(grid, sol.x(grid.nodes), sol.p(grid.nodes), u)
        _, _, r_stat = pmp_residuals(prob, triple)
        sigma_at_0 = abs(sol.p(np.array([0.0]))[0, 0] + 1.0)
        min_sigma_on_set = abs(sol.p(np.array([0.1]))[0, 0] + 1.0)
        assert r_stat >= min_sigma_on_set
        assert r_stat <= sigma_at_0 + 1e-9

    def test_zero_problem_zero_residuals(self):
        from bangsolve.model import ControlAffineProblem

        zp = ControlAffineProblem(
            name="zero", state_dim=1, control_dim=1, horizon=1.0,
            initial_state=np.array([0.7]),
            drift=lambda t, x: np.zeros(1),
            control_matrix=lambda t, x: np.zeros((1, 1)),
            cost_state=lambda t, x: 0.0,
            cost_control=lambda t, x: np.zeros(1),
            control_set=Polytope.interval(-1, 1),
            drift_x=lambda t, x: np.zeros((1, 1)),
            control_matrix_x=lambda t, x: np.zeros((1, 1, 1)),
            cost_state_x=lambda t, x: np.zeros(1),
            cost_control_x=lambda t, x: np.zeros((1, 1)),
            trajectory_bound=5.0,
        )
        grid = Grid(32, 1.0)
        triple = embed(grid, np.full((33, 1), 0.7), np.zeros((33, 1)),
                       np.full((32, 1), 0.3))
        r_state, r_costate, r_stat = pmp_residuals(zp, triple)
        assert r_state == pytest.approx(0.0, abs=1e-14)
        assert r_costate == pytest.approx(0.0, abs=1e-14)
        assert r_stat == 0.0

    def test_stationarity_vanishes_with_refinement(self, prob, sol):
        # the oracle control matches the minimizer sign pattern at the nodes,
        # so the residual is identically zero at every N
        for n in (128, 256):
            triple = oracle_triple(sol, n)
            _, _, r_stat = pmp_residuals(prob, triple)
            assert r_stat == 0.0


class TestAnalyzeSwitching:
    def test_example1_structure(self, prob, sol, tau):
        triple = oracle_triple(sol, 1024)
        rep = analyze_switching(prob, triple)
        edge = rep.edges[0]
        assert len(edge.zeros) == 1
        assert abs(edge.zeros[0] - tau) <= 1.0 / 1024
        slope = ALPHA * tau + BETA
        assert 0.9 * BETA <= edge.kappa <= 1.1 * slope
        assert edge.bang_bang and edge.passed

    def test_zero_count_stable_under_refinement(self, prob, sol):
        for n in (256, 512, 1024, 2048):
            rep = analyze_switching(prob, oracle_triple(sol, n))
            assert rep.zero_count == 1

    def test_kappa_converges_to_switch_slope(self, prob, sol, tau):
        rep = analyze_switching(prob, oracle_triple(sol, 4096))
        slope = ALPHA * tau + BETA
        assert rep.kappa == pytest.approx(slope, rel=0.02)

    def test_no_zero_is_vacuous_pass(self):
        t = np.linspace(0, 1, 101)
        rep = analyze_switching_samples(t, np.ones_like(t))
        assert rep.zeros == []
        assert rep.kappa is None  # the +infinity sentinel
        assert rep.passed

    def test_synthetic_linear_signal(self):
        t = np.linspace(0, 1, 101)
        rep = analyze_switching_samples(t, t - 0.5)
        assert len(rep.zeros) == 1
        assert rep.zeros[0] == pytest.approx(0.5, abs=0.5 / 100)
        assert rep.kappa == pytest.approx(1.0, rel=1e-9)

    def test_singular_plateau_detected(self):
        t = np.linspace(0, 1, 101)
        v = np.concatenate([np.ones(40), np.zeros(21), -np.ones(40)])
        rep = analyze_switching_samples(t, v)
        assert not rep.bang_bang
        assert not rep.passed

    def test_sign_change_across_every_zero(self, prob, sol):
        triple = oracle_triple(sol, 512)
        rep = analyze_switching(prob, triple)
        sigma = triple.sigma_nodes(prob)[:, 0]
        t = triple.grid.nodes
        for z in rep.edges[0].zeros:
            i = np.searchsorted(t, z) - 1
            assert sigma[i] * sigma[i + 1] < 0

    def test_json_serialization_keys(self, prob, sol):
        rep = analyze_switching(prob, oracle_triple(sol, 256))
        payload = json.loads(rep.to_json())
        assert set(payload[0]) == {"edge_index", "zeros", "slopes_minus",
                                   "slopes_plus", "kappa", "tau", "bang_bang", "pass"}


class TestRobustMargin:
    def test_shrinks_kappa(self, prob, sol):
        rep = analyze_switching(prob, oracle_triple(sol, 1024))
        out = robust_switching_margin(rep, 0.1)
        assert out.kappa_robust == pytest.approx(rep.kappa - 0.1)
        assert out.tau_robust == pytest.approx(rep.tau / 2)
        assert out.valid

    def test_zero_gamma_identity(self, prob, sol):
        rep = analyze_switching(prob, oracle_triple(sol, 256))
        out = robust_switching_margin(rep, 0.0)
        assert out.kappa_robust == rep.kappa
        assert out.valid

    def test_large_gamma_invalid(self, prob, sol):
        rep = analyze_switching(prob, oracle_triple(sol, 256))
        out = robust_switching_margin(rep, rep.kappa)
        assert not out.valid

    def test_monotone_in_gamma(self, prob, sol):
        rep = analyze_switching(prob, oracle_triple(sol, 256))
        values = [robust_switching_margin(rep, g).kappa_robust
                  for g in (0.0, 0.1, 0.3, 0.5)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_negative_gamma_rejected(self, prob, sol):
        rep = analyze_switching(prob, oracle_triple(sol, 256))
        with pytest.raises(ValueError):
            robust_switching_margin(rep, -0.1)


class TestCoercivityConstant:
    def test_formula(self):
        t = np.linspace(0, 1, 201)
        rep = analyze_switching_samples(t, 2.0 * (t - 0.5))
        bound = coercivity_constant_bound(rep, Polytope.interval(0, 1))
        assert bound.value == pytest.approx(2.0 / 8.0, rel=1e-6)

    def test_q8_gives_one(self):
        t = np.linspace(0, 1, 201)
        rep = analyze_switching_samples(t, 8.0 * (t - 0.5))
        bound = coercivity_constant_bound(rep, Polytope.interval(0, 1))
        assert bound.value == pytest.approx(1.0, rel=1e-6)

    def test_two_zeros_halves_again(self):
        t = np.linspace(0, 1, 401)
        v = 2.0 * np.sin(2 * np.pi * (t - 0.25))  # zeros at 0.25 and 0.75
        rep = analyze_switching_samples(t, v)
        assert len(rep.zeros) == 2
        q = min(abs(s) for s in rep.slopes_minus + rep.slopes_plus)
        bound = coercivity_constant_bound(rep, Polytope.interval(0, 1))
        assert bound.value == pytest.approx(q / 16.0, rel=1e-9)

    def test_no_switching_sentinel(self):
        t = np.linspace(0, 1, 101)
        rep = analyze_switching_samples(t, np.ones_like(t))
        bound = coercivity_constant_bound(rep, Polytope.interval(0, 1))
        assert bound.value is None
        assert "no switching" in bound.note

    def test_example1_with_paper_slope(self, prob, sol, tau):
        rep = analyze_switching(prob, oracle_triple(sol, 2048))
        bound = coercivity_constant_bound(rep, prob.control_set)
        # one zero, unit width: Q / 8 with Q near the switch slope
        assert bound.value == pytest.approx((ALPHA * tau + BETA) / 8.0, rel=0.02)
