import numpy as np
import pytest

from bangsolve.euler import embed
from bangsolve.grid import Grid, GridFunction, PIECEWISE_CONSTANT
from bangsolve.model import (
    CapabilityError,
    ControlAffineProblem,
    Polytope,
    example1,
    example1_solution,
)
from bangsolve.variation import (
    coercivity_probe,
    duality_check,
    linearize,
    linearized_switching,
    second_variation,
    variational_costate,
    variational_state,
)

ALPHA, BETA = 0.5, 2.0


@pytest.fixture(scope="module")
def prob():
    return example1(ALPHA, BETA)


@pytest.fixture(scope="module")
def sol():
    return example1_solution(ALPHA, BETA)


def oracle_triple(sol, n):
    grid = Grid(n, 1.0)
    return embed(grid, sol.x(grid.nodes), sol.p(grid.nodes), sol.u(grid.nodes[:-1]))


@pytest.fixture(scope="module")
def lin(prob, sol):
    return linearize(prob, oracle_triple(sol, 1024))


@pytest.fixture(scope="module")
def lin2048(prob, sol):
    return linearize(prob, oracle_triple(sol, 2048))


class TestLinearize:
    def test_example1_coefficients(self, lin, sol):
        assert np.allclose(lin.a_nodes, 0.0)
        assert np.allclose(lin.b_nodes, 1.0)
        assert np.allclose(lin.w_nodes, -ALPHA)
        assert np.allclose(lin.s_nodes, 0.0)
        t = lin.grid.nodes
        assert np.allclose(lin.sigma_nodes, sol.p(t) + 1.0)

    def test_symmetry_certificate_exact_zero(self, lin):
        assert lin.symmetry_defect == 0.0

    def test_w_symmetric_every_node(self, lin):
        for w in lin.w_nodes:
            assert np.array_equal(w, w.T)

    def test_zero_problem_all_zero(self):
        zp = ControlAffineProblem(
            name="zero", state_dim=1, control_dim=1, horizon=1.0,
            initial_state=np.zeros(1),
            drift=lambda t, x: np.zeros(1),
            control_matrix=lambda t, x: np.ones((1, 1)),
            cost_state=lambda t, x: 0.0,
            cost_control=lambda t, x: np.zeros(1),
            control_set=Polytope.interval(0, 1),
            drift_x=lambda t, x: np.zeros((1, 1)),
            control_matrix_x=lambda t, x: np.zeros((1, 1, 1)),
            cost_state_x=lambda t, x: np.zeros(1),
            cost_control_x=lambda t, x: np.zeros((1, 1)),
            cost_state_xx=lambda t, x: np.zeros((1, 1)),
            cost_control_xx=lambda t, x: np.zeros((1, 1, 1)),
            dynamics_xx=lambda t, x, u: np.zeros((1, 1, 1)),
            trajectory_bound=5.0,
        )
        grid = Grid(16, 1.0)
        triple = embed(grid, np.zeros((17, 1)), np.zeros((17, 1)), np.zeros((16, 1)))
        ld = linearize(zp, triple)
        assert np.allclose(ld.w_nodes, 0.0)
        assert np.allclose(ld.s_nodes, 0.0)
        assert np.allclose(ld.a_nodes, 0.0)

    def test_capability_error_without_second_derivatives(self, sol):
        bare = example1(ALPHA, BETA)
        bare.cost_state_xx = None
        bare.allow_finite_differences = False
        with pytest.raises(CapabilityError):
            linearize(bare, oracle_triple(sol, 64))


class TestVariationalState:
    def test_unit_variation_integrates_time(self, lin):
        dx = variational_state(lin, np.ones((1024, 1)))
        assert np.allclose(dx.values[:, 0], lin.grid.nodes, atol=1e-12)

    def test_zero_variation(self, lin):
        dx = variational_state(lin, np.zeros((1024, 1)))
        assert np.all(dx.values == 0.0)

    def test_indicator_saturates(self, lin):
        du = (lin.grid.nodes[:-1] < 0.5).astype(float)[:, None]
        dx = variational_state(lin, du)
        expected = np.minimum(lin.grid.nodes, 0.5)
        assert np.allclose(dx.values[:, 0], expected, atol=1e-12)


class TestSecondVariation:
    def test_unit_variation_closed_form(self, lin):
        val = second_variation(lin, np.ones((1024, 1)))
        assert val == pytest.approx(-ALPHA / 3.0, abs=1e-10)

    def test_zero(self, lin):
        assert second_variation(lin, np.zeros((1024, 1))) == 0.0

    def test_quadratic_scaling(self, lin):
        base = second_variation(lin, np.full((1024, 1), 1.0))
        for c in (-2.0, -1.0, 0.5, 3.0):
            val = second_variation(lin, np.full((1024, 1), c))
            assert val == pytest.approx(c * c * base, rel=1e-10)

    def test_homogeneity_random_directions(self, lin):
        rng = np.random.default_rng(1)
        du = rng.uniform(-1, 1, size=(1024, 1))
        base = second_variation(lin, du)
        for c in (-2.0, -1.0, 0.5, 3.0):
            assert second_variation(lin, c * du) == pytest.approx(c * c * base, rel=1e-10)


class TestLinearizedSwitching:
    def test_reference_control_reproduces_sigma(self, lin):
        lam = linearized_switching(lin, lin.u_ref.values)
        assert np.max(np.abs(lam.values - lin.sigma_nodes)) < 1e-8

    def test_rho_enters_additively(self, lin):
        grid = lin.grid
        rho = GridFunction(grid, np.full(grid.n_steps + 1, 0.25), "piecewise-linear")
        lam = linearized_switching(lin, lin.u_ref.values, z=(None, None, rho))
        assert np.allclose(lam.values, lin.sigma_nodes - 0.25, atol=1e-12)

    def test_flipped_control_matches_quadrature(self, lin, sol):
        # u = 1 everywhere: the response is B^T dp with dp(t) = -alpha int_t^1 dx
        grid = lin.grid
        u = np.ones((grid.n_steps, 1))
        du = u - lin.u_ref.values
        lam = linearized_switching(lin, u)
        dx = variational_state(lin, du)
        t = grid.nodes
        dx_vals = dx.values[:, 0]
        # trapezoid on the fine grid is well within the check tolerance
        tail = np.concatenate([
            [np.trapezoid(dx_vals, t)],
            [np.trapezoid(dx_vals[i:], t[i:]) for i in range(1, len(t))],
        ])
        expected = lin.sigma_nodes[:, 0] - ALPHA * tail
        assert np.max(np.abs(lam.values[:, 0] - expected)) < 1e-6

    def test_affine_in_control(self, lin):
        rng = np.random.default_rng(2)
        du1 = rng.uniform(-1, 1, size=(1024, 1))
        du2 = rng.uniform(-1, 1, size=(1024, 1))
        a, b = 1.7, -0.6
        u_ref = lin.u_ref.values
        lam_combo = linearized_switching(lin, u_ref + a * du1 + b * du2)
        lam1 = linearized_switching(lin, u_ref + du1)
        lam2 = linearized_switching(lin, u_ref + du2)
        combo = (lam_combo.values - lin.sigma_nodes)
        split = a * (lam1.values - lin.sigma_nodes) + b * (lam2.values - lin.sigma_nodes)
        assert np.max(np.abs(combo - split)) < 1e-9


class TestDuality:
    def test_unit_variation_closed_form(self, lin2048):
        rep = duality_check(lin2048, np.ones((2048, 1)))
        assert rep.rhs == pytest.approx(-ALPHA / 3.0, abs=1e-10)
        assert rep.gap <= 1e-8

    def test_zero_variation(self, lin):
        rep = duality_check(lin, np.zeros((1024, 1)))
        assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.gap == 0.0

    def test_random_variations_small_gap(self, lin2048):
        rng = np.random.default_rng(3)
        for _ in range(5):
            du = rng.uniform(-1, 1, size=(2048, 1))
            assert duality_check(lin2048, du).gap <= 1e-6

    def test_gap_decays_first_order(self, prob, sol):
        # fixed coarse variation evaluated across refinements
        rng = np.random.default_rng(4)
        coarse = rng.uniform(-1, 1, size=16)
        gaps = []
        for n in (128, 256, 512):
            linn = linearize(prob, oracle_triple(sol, n))
            du = np.repeat(coarse, n // 16)[:, None]
            gaps.append(duality_check(linn, du).gap)
        orders = np.log2(np.array(gaps[:-1]) / np.array(gaps[1:]))
        assert np.all(orders >= 1.0)

    def test_costate_terminal_condition(self, lin):
        du = np.ones((1024, 1))
        dx = variational_state(lin, du)
        dp = variational_costate(lin, dx, du)
        assert dp.values[-1, 0] == 0.0


class TestCoercivityProbe:
    def test_example1_margin_nonnegative(self, lin, prob):
        rep = coercivity_probe(lin, prob.control_set, c0=BETA / 2 - ALPHA,
                               alpha0=1.0, sample_count=200, seed=0, gamma0=0.1)
        assert rep.min_margin is not None
        assert rep.min_margin >= 0.0
        assert rep.passed

    def test_absurd_constant_yields_counterexample(self, lin, prob):
        rep = coercivity_probe(lin, prob.control_set, c0=1e3,
                               alpha0=1.0, sample_count=50, seed=0, gamma0=0.1)
        assert rep.min_margin < 0.0
        assert rep.counterexample is not None
        assert rep.counterexample["du_l1"] == pytest.approx(rep.argmin_sample_norm)

    def test_empty_sample_vacuous(self, lin, prob):
        rep = coercivity_probe(lin, prob.control_set, c0=0.5, sample_count=0, seed=0)
        assert rep.min_margin is None
        assert rep.passed
        assert "vacuous" in rep.warning

    def test_sign_restricted_box_mode(self, lin, prob):
        rep = coercivity_probe(lin, prob.control_set, c0=BETA / 2 - ALPHA,
                               alpha0=1.0, sample_count=100, seed=5, gamma0=0.1,
                               sign_restricted=True)
        assert rep.min_margin >= 0.0

    def test_sign_restricted_requires_box(self, lin):
        tri = Polytope.general([[0, 0], [1, 0], [0, 1]], [(0, 1), (1, 2), (2, 0)])
        with pytest.raises(ValueError):
            coercivity_probe(lin, tri, c0=0.5, sample_count=1, sign_restricted=True)

    def test_determinism(self, lin, prob):
        a = coercivity_probe(lin, prob.control_set, c0=0.5, sample_count=50,
                             seed=9, gamma0=0.1)
        b = coercivity_probe(lin, prob.control_set, c0=0.5, sample_count=50,
                             seed=9, gamma0=0.1)
        assert a.min_margin == b.min_margin

    def test_json_keys(self, lin, prob):
        rep = coercivity_probe(lin, prob.control_set, c0=0.5, sample_count=10, seed=0)
        payload = rep.to_json_dict()
        for key in ("min_margin", "argmin_sample_norm", "samples", "seed",
                    "c0", "alpha0", "gamma0"):
            assert key in payload
