"""Core stepper tests: increments, step bounds, trajectories, oracles."""

import math

import numpy as np
import pytest

from stabstep.core import (
    ButcherTableau,
    ConfigurationError,
    ConstantController,
    ControllerError,
    EULER,
    HEUN,
    HybridTrajectory,
    IMPLICIT_EULER,
    IMPROVED_POLYGON,
    KUTTA3,
    OracleError,
    RK4,
    StageSolveError,
    StepBoundConfig,
    TABLEAUS,
    VectorField,
    advance,
    default_phi,
    estimate_gamma,
    estimate_local_lipschitz,
    growth_bound,
    linear_field,
    reference_at_times,
    reference_solve,
    reference_state,
    rk_increment,
    write_trajectory_csv,
)

M1 = np.array([[-1.0, 1.0], [-1.0, -1.0]])


def scalar_decay():
    """x' = -x in one dimension, with exact bounds."""
    return linear_field(np.array([[-1.0]]))


class TestTableaus:
    def test_catalog_orders(self):
        assert EULER.order == 1
        assert HEUN.order == 2
        assert IMPROVED_POLYGON.order == 2
        assert KUTTA3.order == 3
        assert RK4.order == 4
        assert IMPLICIT_EULER.order == 1

    def test_explicit_flags(self):
        for tab in (EULER, HEUN, IMPROVED_POLYGON, KUTTA3, RK4):
            assert tab.explicit
        assert not IMPLICIT_EULER.explicit

    def test_a_norm_is_max_row_sum(self):
        assert EULER.a_norm == 0.0
        assert HEUN.a_norm == 1.0
        assert IMPLICIT_EULER.a_norm == 1.0
        # Kutta's third-order scheme has middle row (1/2, 0), last (-1, 2).
        assert KUTTA3.a_norm == pytest.approx(3.0)

    def test_registry_names_match(self):
        for name, tab in TABLEAUS.items():
            assert tab.name == name

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigurationError):
            ButcherTableau("bad", np.zeros((1, 1)), np.array([0.5]), 1)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            ButcherTableau("bad", np.zeros((2, 2)), np.array([1.0]), 1)


class TestRkIncrement:
    def test_euler_is_f_of_x(self):
        f = scalar_decay()
        out = rk_increment(EULER, f, np.array([1.0]), 0.3)
        assert out[0] == -1.0

    @pytest.mark.parametrize("tab", [EULER, HEUN, IMPROVED_POLYGON,
                                     KUTTA3, RK4, IMPLICIT_EULER])
    def test_zero_step_collapses_to_f(self, tab):
        # F(0, x) = f(x) is the consistency normalization every scheme obeys.
        f = linear_field(M1)
        x = np.array([0.7, -0.4])
        np.testing.assert_allclose(rk_increment(tab, f, x, 0.0), f(x),
                                   rtol=0, atol=0)

    def test_heun_on_linear_decay(self):
        # Stages 1 and 1-h average to F = -1 + h/2.
        f = scalar_decay()
        out = rk_increment(HEUN, f, np.array([1.0]), 0.2)
        assert out[0] == pytest.approx(-0.9, abs=1e-15)

    def test_implicit_euler_large_step(self):
        # Y = x/(1+h) solves the stage equation; increment is f(Y).
        f = scalar_decay()
        out = rk_increment(IMPLICIT_EULER, f, np.array([1.0]), 10.0)
        assert out[0] == pytest.approx(-1.0 / 11.0, rel=1e-14)

    def test_rk4_matches_degree_four_taylor(self):
        f = linear_field(M1)
        x = np.array([1.0, 2.0])
        h = 0.05
        inc = rk_increment(RK4, f, x, h)
        taylor = x.copy()
        term = x.copy()
        for k in range(1, 5):
            term = (h / k) * (M1 @ term)
            taylor = taylor + term
        np.testing.assert_allclose(x + h * inc, taylor, rtol=1e-15)

    def test_fixed_point_diverges_without_jacobian(self):
        # hL > 1 defeats the fixed-point stage solver; Newton is not
        # available because no jacobian was supplied.
        stiff = VectorField(dim=1, f=lambda x: -1000.0 * x)
        with pytest.raises(StageSolveError):
            rk_increment(IMPLICIT_EULER, stiff, np.array([1.0]), 0.5)

    def test_newton_handles_the_same_step(self):
        stiff = VectorField(dim=1, f=lambda x: -1000.0 * x,
                            jacobian=lambda x: np.array([[-1000.0]]))
        out = rk_increment(IMPLICIT_EULER, stiff, np.array([1.0]), 0.5)
        y = 1.0 / 501.0
        assert out[0] == pytest.approx(-1000.0 * y, rel=1e-12)

    @pytest.mark.parametrize("tab,order,h_lo", [
        (EULER, 1, -3.0), (HEUN, 2, -3.0), (IMPROVED_POLYGON, 2, -3.0),
        (KUTTA3, 3, -2.0), (RK4, 4, -1.5),
    ])
    def test_local_order(self, tab, order, h_lo):
        """One-step error against the flow decays like h^(p+1).

        The lower end of each h range keeps the error well above the
        1e-13 oracle tolerance, otherwise the fit sees noise.
        """
        f = linear_field(M1)
        x = np.array([1.0, 0.5])
        hs = np.logspace(h_lo, -0.5, 5)
        errs = []
        for h in hs:
            truth = reference_state(f, x, float(h), tol=1e-13)
            inc = rk_increment(tab, f, x, float(h))
            errs.append(np.linalg.norm(x + h * inc - truth))
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert slope >= order + 0.8


class TestStepBounds:
    def test_explicit_euler_unconstrained(self):
        cfg = StepBoundConfig(r=7.0)
        phi = default_phi(scalar_decay(), EULER, cfg, np.array([3.0]))
        assert phi == 7.0

    def test_heun_bound_on_decay(self):
        # L = gamma = 1 and |A| = 1, so the ball bound is lam/2.
        cfg = StepBoundConfig(r=1.0, lambda_ball=0.5)
        phi = default_phi(scalar_decay(), HEUN, cfg, np.array([2.0]))
        assert phi == pytest.approx(0.25)

    def test_stiff_bound_scales_with_lipschitz(self):
        a = np.array([[-1000.0, 0.0], [1.0, -1.0]])
        cfg = StepBoundConfig(r=1.0, lambda_ball=0.5)
        phi = default_phi(linear_field(a), HEUN, cfg, np.array([1.0, 1.0]))
        norm = np.linalg.norm(a, 2)
        assert phi == pytest.approx(0.5 / (2.0 * norm), rel=1e-12)
        assert phi == pytest.approx(2.5e-4, rel=1e-3)

    def test_near_origin_returns_cap(self):
        cfg = StepBoundConfig(r=2.0)
        phi = default_phi(scalar_decay(), HEUN, cfg, np.array([1e-15]))
        assert phi == 2.0

    def test_growth_bound_dominates_one_step(self):
        # |x + h F(h, x)| <= |x| M(|x|) whenever h respects the ball bound.
        f = linear_field(M1)
        cfg = StepBoundConfig(r=0.1, lambda_ball=0.5)
        bound = growth_bound(f, HEUN, cfg)
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = rng.normal(size=2) * rng.uniform(0.5, 3.0)
            h = rng.uniform(0.0, default_phi(f, HEUN, cfg, x))
            inc = rk_increment(HEUN, f, x, h)
            nx = np.linalg.norm(x)
            assert np.linalg.norm(x + h * inc) <= nx * bound(nx) * (1 + 1e-12)

    def test_fallback_estimates_are_conservative(self):
        """Sampled constants must dominate the exact ones for a linear map."""
        bare = VectorField(dim=2, f=lambda x: M1 @ x)
        true_norm = np.linalg.norm(M1, 2)
        lip = estimate_local_lipschitz(bare, np.array([1.0, 2.0]), 0.5)
        assert lip >= true_norm
        gam = estimate_gamma(bare, 3.0)
        # gamma(s) >= sup |f| / |x| over the ball of radius s
        assert gam >= true_norm


class TestAdvance:
    def test_input_scaling_halves_the_step(self):
        # u = ln 2 turns a unit commanded step into 1/2, and Euler on
        # x' = -x with h = 1/2 halves the state exactly.
        f = scalar_decay()
        cfg = StepBoundConfig(r=10.0, u_input=lambda t: math.log(2.0))
        traj = advance(EULER, f, ConstantController(1.0), np.array([1.0]),
                       t_end=1.0, cfg=cfg)
        np.testing.assert_array_equal(traj.tau, [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(traj.states.ravel(), [1.0, 0.5, 0.25])

    def test_clock_identity_holds(self):
        f = linear_field(M1)
        rng = np.random.default_rng(11)

        def jittery(x, tau):
            return float(rng.uniform(0.01, 0.1))

        traj = advance(EULER, f, jittery, np.array([1.0, 0.0]), t_end=2.0)
        np.testing.assert_array_equal(traj.tau[1:], traj.tau[:-1] + traj.steps)
        assert traj.final_time >= 2.0

    def test_stops_at_norm_floor(self):
        f = scalar_decay()
        cfg = StepBoundConfig(r=1.0, norm_floor=1e-6)
        traj = advance(EULER, f, ConstantController(0.5), np.array([1.0]),
                       t_end=math.inf, max_steps=10_000, cfg=cfg)
        assert np.linalg.norm(traj.final_state) < 1e-6
        assert traj.steps.size < 100

    def test_rejects_nonpositive_step(self):
        f = scalar_decay()
        with pytest.raises(ControllerError):
            advance(EULER, f, lambda x, tau: 0.0, np.array([1.0]), 1.0)

    def test_max_steps_truncates(self):
        f = scalar_decay()
        traj = advance(EULER, f, ConstantController(0.1), np.array([1.0]),
                       t_end=math.inf, max_steps=7)
        assert traj.steps.size == 7


class TestTrajectory:
    def make(self):
        tau = np.array([0.0, 0.5, 1.5])
        states = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, -2.0]])
        return HybridTrajectory(tau=tau, states=states,
                                steps=np.array([0.5, 1.0]))

    def test_interpolant_is_piecewise_affine(self):
        traj = self.make()
        np.testing.assert_allclose(traj.state_at(0.25), [0.5, 1.0])
        np.testing.assert_allclose(traj.state_at(1.0), [2.0, 0.0])

    def test_interpolant_exact_at_nodes(self):
        traj = self.make()
        for i, t in enumerate(traj.tau):
            np.testing.assert_array_equal(traj.state_at(float(t)),
                                          traj.states[i])

    def test_mismatched_clock_rejected(self):
        with pytest.raises(ConfigurationError):
            HybridTrajectory(tau=np.array([0.0, 0.4]),
                             states=np.zeros((2, 1)),
                             steps=np.array([0.5]))

    def test_csv_round_trip(self, tmp_path):
        traj = self.make()
        path = tmp_path / "t.csv"
        write_trajectory_csv(traj, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "tau,h,x_0,x_1"
        data = np.loadtxt(lines[1:], delimiter=",")
        np.testing.assert_array_equal(data[:, 0], traj.tau)
        np.testing.assert_array_equal(data[:-1, 1], traj.steps)
        assert data[-1, 1] == 0.0
        np.testing.assert_array_equal(data[:, 2:], traj.states)


class TestReferenceOracle:
    def test_scalar_decay_endpoint(self):
        f = scalar_decay()
        x = reference_state(f, np.array([1.0]), 1.0)
        assert x[0] == pytest.approx(math.exp(-1.0), rel=1e-12)

    def test_half_turn_of_rotation(self):
        rot = linear_field(np.array([[0.0, -1.0], [1.0, 0.0]]))
        x = reference_state(rot, np.array([1.0, 0.0]), math.pi)
        np.testing.assert_allclose(x, [-1.0, 0.0], atol=1e-11)

    def test_error_estimate_reported(self):
        f = scalar_decay()
        sol = reference_solve(f, np.array([1.0]), 2.0, tol=1e-10)
        assert sol.error_estimate <= 1e-10
        assert sol.at(2.0)[0] == pytest.approx(math.exp(-2.0), rel=1e-9)

    def test_at_times_matches_closed_form(self):
        f = scalar_decay()
        times = np.array([0.0, 0.3, 0.31, 1.7])
        vals = reference_at_times(f, np.array([1.0]), times)
        np.testing.assert_allclose(vals.ravel(), np.exp(-times), rtol=1e-9)

    def test_times_must_start_at_zero(self):
        f = scalar_decay()
        with pytest.raises(OracleError):
            reference_at_times(f, np.array([1.0]), np.array([0.1, 0.2]))
