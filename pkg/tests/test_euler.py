import json

import numpy as np
import pytest

from bangsolve.euler import (
    ConvergenceRow,
    SweepConfig,
    convergence_study,
    discrete_switching,
    embed,
    fit_order,
    residuals,
    solution_distance,
    sweep_solve,
    triple_as_solution,
)
from bangsolve.grid import Grid
from bangsolve.model import (
    ControlAffineProblem,
    Polytope,
    example1,
    example1_solution,
    example1_switch_time,
    hamiltonian_minimizer,
    minimizer_margin,
)
from bangsolve.integrate import euler_backward_nodes, euler_forward_nodes

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


@pytest.fixture(scope="module")
def result256(prob):
    return sweep_solve(prob, Grid(256, 1.0))


def constant_sigma_problem():
    """w = 0, s = 1, a = 0, B = 1: sigma = p + 1 = 1 for every control."""
    return ControlAffineProblem(
        name="always-positive", state_dim=1, control_dim=1, horizon=1.0,
        initial_state=np.zeros(1),
        drift=lambda t, x: np.zeros(1),
        control_matrix=lambda t, x: np.ones((1, 1)),
        cost_state=lambda t, x: 0.0,
        cost_control=lambda t, x: np.ones(1),
        control_set=Polytope.interval(0.0, 1.0),
        drift_x=lambda t, x: np.zeros((1, 1)),
        control_matrix_x=lambda t, x: np.zeros((1, 1, 1)),
        cost_state_x=lambda t, x: np.zeros(1),
        cost_control_x=lambda t, x: np.zeros((1, 1)),
        trajectory_bound=5.0,
    )


class TestSweep:
    def test_example1_switch_location(self, result256, tau):
        assert result256.converged
        u = result256.u_cells[:, 0]
        switches = np.nonzero(np.diff(u))[0]
        assert len(switches) == 1
        grid = result256.grid
        switch_time = grid.nodes[switches[0] + 1]
        assert abs(switch_time - tau) <= 2 * grid.h

    def test_recursions_bit_exact(self, prob, result256):
        grid = result256.grid
        x = euler_forward_nodes(prob, result256.u_cells, grid, None)
        p = euler_backward_nodes(prob, x, result256.u_cells, grid, None)
        assert np.array_equal(x, result256.x_nodes)
        assert np.array_equal(p, result256.p_nodes)

    def test_transversality_exact(self, result256):
        assert np.all(result256.p_nodes[-1] == 0.0)

    def test_post_rounding_stationarity(self, prob, result256):
        grid = result256.grid
        sigma = discrete_switching(prob, result256.x_nodes, result256.p_nodes, grid)
        cfg = SweepConfig()
        for i in range(grid.n_steps):
            if minimizer_margin(sigma[i], prob.control_set) > cfg.tol_round:
                expect = hamiltonian_minimizer(sigma[i], prob.control_set)
                assert np.array_equal(result256.u_cells[i], expect)

    def test_constant_sigma_reaches_vertex_in_one_undamped_step(self):
        cp = constant_sigma_problem()
        grid = Grid(16, 1.0)
        res = sweep_solve(cp, grid, SweepConfig(damping=1.0, max_iterations=2))
        assert np.all(res.u_cells == 0.0)
        assert res.converged

    def test_zero_iteration_budget(self, prob):
        grid = Grid(16, 1.0)
        res = sweep_solve(prob, grid, SweepConfig(max_iterations=0))
        assert not res.converged
        assert np.allclose(res.u_cells, 0.5)  # the centroid initial control

    def test_initial_control_shape_check(self, prob):
        with pytest.raises(ValueError):
            sweep_solve(prob, Grid(16, 1.0), initial_control=np.zeros((4, 1)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SweepConfig(damping=0.0)
        with pytest.raises(ValueError):
            SweepConfig(tol_control=-1.0)


class TestEmbed:
    def test_linear_interpolation_midpoint(self):
        grid = Grid(1, 1.0)
        triple = embed(grid, np.array([[0.0], [1.0]]), np.zeros((2, 1)),
                       np.zeros((1, 1)))
        assert triple.x(0.5)[0] == pytest.approx(0.5)

    def test_half_open_control_cells(self):
        grid = Grid(2, 1.0)
        triple = embed(grid, np.zeros((3, 1)), np.zeros((3, 1)),
                       np.array([[1.0], [0.0]]))
        assert triple.u(0.49)[0] == 1.0
        assert triple.u(0.51)[0] == 0.0

    def test_node_values_preserved_exactly(self, result256):
        triple = result256.embed()
        assert np.array_equal(triple.x.values, result256.x_nodes)
        assert np.array_equal(triple.p.values, result256.p_nodes)
        assert np.array_equal(triple.u.values, result256.u_cells)

    def test_ball_monitor_distance(self, result256, sol):
        err = solution_distance(result256.embed(), sol)
        assert err.total <= 1.0  # well inside the working ball
        assert err.total == pytest.approx(0.0091, abs=0.002)  # O(h) at N = 256


class TestResiduals:
    def test_example1_halving(self, prob, sol):
        values = {}
        for n in (64, 128, 256):
            res = sweep_solve(prob, Grid(n, 1.0))
            values[n] = residuals(prob, res.embed())
        # d1 is identically zero for this problem: the dynamics are constant
        # within every cell, so forward Euler has no defect
        for n in values:
            assert values[n].d1 <= 1e-14
        for a, b in ((64, 128), (128, 256)):
            assert 1.7 <= values[a].d2 / values[b].d2 <= 2.3
            assert 1.7 <= values[a].d3 / values[b].d3 <= 2.3

    def test_constant_dynamics_zero_state_defect(self, prob, result256):
        out = residuals(prob, result256.embed())
        assert out.d1 == pytest.approx(0.0, abs=1e-14)

    def test_single_cell_smoke(self, prob):
        res = sweep_solve(prob, Grid(1, 1.0), SweepConfig(max_iterations=5))
        out = residuals(prob, res.embed())
        assert np.isfinite(out.d1) and np.isfinite(out.d2) and np.isfinite(out.d3)


class TestControlError:
    def test_concentrated_on_switch_cell(self, prob, sol):
        for n in (128, 256, 512):
            res = sweep_solve(prob, Grid(n, 1.0))
            err = solution_distance(res.embed(), sol)
            assert err.u_l1 <= 2.0 / n  # width 1 times at most 2 cells misplacement


class TestFitOrder:
    def test_clean_first_order(self):
        rows = [ConvergenceRow(n, 1.0 / n, 0, 0, 0, 3.0 / n, True)
                for n in (32, 64, 128, 256)]
        order, c, used = fit_order(rows)
        assert order == pytest.approx(1.0, abs=1e-12)
        assert c == pytest.approx(3.0, rel=1e-9)
        assert used == 4

    def test_preasymptotic_row_dropped(self):
        rows = [ConvergenceRow(32, 1 / 32, 0, 0, 0, 10.0, True)]
        rows += [ConvergenceRow(n, 1.0 / n, 0, 0, 0, 2.0 / n, True)
                 for n in (64, 128, 256, 512)]
        order, _, used = fit_order(rows)
        assert used == 4
        assert order == pytest.approx(1.0, abs=1e-9)

    def test_single_row_sentinel(self):
        rows = [ConvergenceRow(64, 1 / 64, 0, 0, 0, 0.1, True)]
        order, c, used = fit_order(rows)
        assert order is None and c is None

    def test_nonconverged_rows_excluded(self):
        rows = [ConvergenceRow(n, 1.0 / n, 0, 0, 0, 2.0 / n, n != 128)
                for n in (32, 64, 128, 256)]
        _, _, used = fit_order(rows)
        assert used == 3


class TestConvergenceStudy:
    def test_self_comparison_is_zero(self, prob):
        res = sweep_solve(prob, Grid(64, 1.0))
        oracle = triple_as_solution(res.embed())
        table = convergence_study(prob, oracle, [64])
        assert table.rows[0].err_total == pytest.approx(0.0, abs=1e-14)
        assert table.order is None  # a single row cannot fix a slope

    def test_rows_in_input_order_and_csv_format(self, prob, sol):
        table = convergence_study(prob, sol, [32, 64])
        text = table.to_csv_text()
        lines = text.strip().splitlines()
        assert lines[0] == "N,h,err_x_w11,err_p_w11,err_u_l1,err_total,converged"
        assert lines[1].startswith("32,") and lines[2].startswith("64,")
        footer = json.loads(lines[-1].lstrip("# "))
        assert set(footer) == {"order", "constant_C", "rows_used"}

    def test_requires_increasing_n(self, prob, sol):
        with pytest.raises(ValueError):
            convergence_study(prob, sol, [64, 32])

    def test_nonconverged_row_flagged_study_continues(self, prob, sol):
        table = convergence_study(prob, sol, [16, 32],
                                  SweepConfig(max_iterations=1))
        assert all(not r.converged for r in table.rows)
        assert table.order is None
        assert len(table.rows) == 2
