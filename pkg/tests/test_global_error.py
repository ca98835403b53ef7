"""Defects, global error measurement, and the two accuracy bounds."""

import math

import numpy as np
import pytest

from stabstep.core import (
    ConstantController,
    EULER,
    HEUN,
    HybridTrajectory,
    KUTTA3,
    advance,
    linear_field,
)
from stabstep.global_error import (
    ErrorBudget,
    compliant_steps,
    defect,
    error_bound,
    error_bound_finite_time,
    error_budget_step,
    error_report,
    estimate_increment_lipschitz,
    euler_budget_step,
    global_error,
    order_reduction_exponent,
)

DECAY = linear_field(np.array([[-1.0]]))


def unit_budget(epsilon=0.1, lam=0.5):
    """sigma = L = 1, K = 1/2, first order, identity gain, |x0| = 1."""
    return ErrorBudget(epsilon=epsilon, sigma=1.0, lam=lam,
                       a_gain=lambda s: s, l_of_x0=1.0, k_of_x0=0.5,
                       p=1, x0_norm=1.0)


class TestDefect:
    def test_euler_single_step_value(self):
        # (e^{-h} - 1)/h + 1 at h = 0.1
        d = defect(DECAY, EULER, np.array([1.0]), 0.1)
        expected = (math.exp(-0.1) - 1.0) / 0.1 + 1.0
        assert d == pytest.approx(expected, rel=1e-9)
        assert d == pytest.approx(0.048374180359595176, rel=1e-8)

    def test_vanishes_at_equilibrium(self):
        assert defect(DECAY, EULER, np.array([0.0]), 0.3) == 0.0

    @pytest.mark.parametrize("tab,order", [(EULER, 1), (HEUN, 2),
                                           (KUTTA3, 3)])
    def test_order_in_h(self, tab, order):
        hs = np.logspace(-2.5, -1, 4)
        ds = [defect(DECAY, tab, np.array([1.0]), float(h)) for h in hs]
        slope = np.polyfit(np.log(hs), np.log(ds), 1)[0]
        assert slope >= order - 0.15


class TestFiniteTimeBound:
    def test_closed_form(self):
        budget = unit_budget()
        # (D/L)(e^{L tau} - 1)
        val = error_bound_finite_time(budget, 1e-3, 2.0)
        assert val == pytest.approx(1e-3 * (math.e ** 2 - 1.0), rel=1e-12)

    def test_euler_composition(self):
        """Measured global error stays under the accumulated-defect bound."""
        rng = np.random.default_rng(41)
        steps = rng.uniform(0.01, 0.2, size=60)
        taus = np.concatenate([[0.0], np.cumsum(steps)])
        states = np.concatenate([[1.0], np.cumprod(1.0 - steps)])[:, None]
        traj = HybridTrajectory(tau=taus, states=states, steps=steps)
        errs = global_error(traj, DECAY)
        d_sup = max(defect(DECAY, EULER, states[i], float(steps[i]))
                    for i in range(steps.size))
        budget = unit_budget()
        for e, t in zip(errs, taus):
            assert e <= error_bound_finite_time(budget, d_sup, float(t)) \
                + 1e-12


class TestAsymptoticBound:
    def test_interpolation_value(self):
        # lam*sigma = L makes the exponent 1/2: sqrt(D * 2 a(|x0|))
        budget = ErrorBudget(epsilon=0.1, sigma=1.0, lam=1.0,
                             a_gain=lambda s: s, l_of_x0=1.0, k_of_x0=0.5,
                             p=1, x0_norm=1.0)
        assert error_bound(budget, 1e-4) \
            == pytest.approx(math.sqrt(2e-4), rel=1e-12)
        assert error_bound(budget, 1e-4) == pytest.approx(0.0141421, rel=1e-4)

    def test_scaling_in_the_defect(self):
        budget = unit_budget()
        alpha = budget.lam * budget.sigma / (budget.lam * budget.sigma
                                             + budget.l_of_x0)
        ratio = error_bound(budget, 2e-4) / error_bound(budget, 1e-4)
        assert ratio == pytest.approx(2.0 ** alpha, rel=1e-12)

    def test_zero_defect_zero_bound(self):
        assert error_bound(unit_budget(), 0.0) == 0.0


class TestBudgetStepRule:
    def test_euler_value_at_start(self):
        # 4/L * (2 a(1)/eps)^{-(q+lam)/lam} with q = 1, lam = 1/2: 4/20^3
        budget = unit_budget(epsilon=0.1, lam=0.5)
        h = euler_budget_step(budget, 0.0, phi_at_x=1e9)
        assert h == pytest.approx(5e-4, rel=1e-12)

    def test_grows_exponentially_then_caps(self):
        budget = unit_budget(epsilon=0.1, lam=0.5)
        tau = math.log(1000.0)
        assert euler_budget_step(budget, tau, phi_at_x=1e9) \
            == pytest.approx(0.5, rel=1e-12)
        assert euler_budget_step(budget, tau, phi_at_x=0.1) == 0.1

    def test_loose_epsilon_defers_to_phi(self):
        budget = unit_budget(epsilon=math.inf)
        assert euler_budget_step(budget, 0.0, phi_at_x=0.7) == 0.7

    def test_general_rule_matches_euler_instance(self):
        # first order with K = L^2/2 collapses the generic constant to 4/L
        budget = ErrorBudget(epsilon=0.05, sigma=1.3, lam=0.4,
                             a_gain=lambda s: 2.0 * s, l_of_x0=0.8,
                             k_of_x0=0.8 ** 2 / 2.0, p=1, x0_norm=1.5)
        for tau in (0.0, 1.0, 3.7):
            assert error_budget_step(budget, tau, 1e9) \
                == pytest.approx(euler_budget_step(budget, tau, 1e9),
                                 rel=1e-12)

    def test_order_reduction_exponent(self):
        budget = unit_budget(lam=0.5)
        # lam sigma / (lam sigma + L) = 1/3
        assert order_reduction_exponent(budget) == pytest.approx(1.0 / 3.0)


class TestCompliantSteps:
    def test_every_step_obeys_the_rule(self):
        rng = np.random.default_rng(50)
        budget = unit_budget()
        steps = compliant_steps(budget, 1.0, 15.0, rng)
        taus = np.concatenate([[0.0], np.cumsum(steps)])
        for i, h in enumerate(steps):
            cap = euler_budget_step(budget, float(taus[i]), 1.0)
            assert h <= cap * (1.0 + 1e-12)

    def test_covers_the_horizon(self):
        rng = np.random.default_rng(51)
        steps = compliant_steps(unit_budget(), 1.0, 5.0, rng)
        assert np.sum(steps) >= 5.0
        assert np.all(steps > 0.0)


class TestErrorReport:
    def test_bounds_hold_on_compliant_run(self):
        rng = np.random.default_rng(52)
        budget = unit_budget()
        steps = compliant_steps(budget, 1.0, 8.0, rng)
        taus = np.concatenate([[0.0], np.cumsum(steps)])
        states = np.concatenate([[1.0], np.cumprod(1.0 - steps)])[:, None]
        traj = HybridTrajectory(tau=taus, states=states, steps=steps)
        report = error_report(traj, DECAY, EULER, budget, phi_cap=1.0)
        assert report.bounds_hold
        assert report.max_error <= budget.epsilon

    def test_csv_columns(self, tmp_path):
        budget = unit_budget()
        steps = np.full(10, 0.05)
        taus = np.concatenate([[0.0], np.cumsum(steps)])
        states = np.concatenate([[1.0], np.cumprod(1.0 - steps)])[:, None]
        traj = HybridTrajectory(tau=taus, states=states, steps=steps)
        report = error_report(traj, DECAY, EULER, budget, phi_cap=1.0)
        path = tmp_path / "report.csv"
        report.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "tau,e_norm,bound_7_4,bound_7_6,rule_step"


class TestIncrementLipschitz:
    def test_dominates_linear_truth(self):
        rng = np.random.default_rng(53)
        # Euler increment of a linear field is Lipschitz with constant |A|
        a = np.array([[-1.0, 1.0], [-1.0, -1.0]])
        est = estimate_increment_lipschitz(linear_field(a), EULER,
                                           np.array([1.0, 0.0]), 1.0, 0.5,
                                           rng=rng)
        assert est >= np.linalg.norm(a, 2)


class TestBudgetValidation:
    def test_gain_must_vanish_at_zero(self):
        with pytest.raises(Exception):
            ErrorBudget(epsilon=0.1, sigma=1.0, lam=0.5,
                        a_gain=lambda s: s + 1.0, l_of_x0=1.0,
                        k_of_x0=0.5, p=1, x0_norm=1.0)

    def test_q_property(self):
        budget = ErrorBudget(epsilon=0.1, sigma=2.0, lam=0.5,
                             a_gain=lambda s: s, l_of_x0=3.0, k_of_x0=0.5,
                             p=1, x0_norm=1.0)
        assert budget.q == pytest.approx(1.5)
