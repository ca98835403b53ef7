"""Implicit Euler: direct solves, Newton, convex decrease, gradient flows."""

import numpy as np
import pytest

from stabstep.core import (
    ConfigurationError,
    StageSolveConfig,
    StepBoundConfig,
    VectorField,
    linear_field,
)
from stabstep.implicit import (
    check_midpoint_convexity,
    convex_decrease_check,
    gradient_system_field,
    gradient_system_phi,
    implicit_euler_step,
)
from stabstep.lyapunov import LyapunovFunction, quadratic_lyapunov
from stabstep.applications import example_fields

M1 = np.array([[-1.0, 1.0], [-1.0, -1.0]])


def test_linear_unit_step():
    # (I - M1)^{-1} (1, 0) by hand: det = 5.
    out = implicit_euler_step(linear_field(M1), np.array([1.0, 0.0]), 1.0)
    np.testing.assert_allclose(out, [0.4, -0.2], rtol=1e-15)


def test_scalar_decay_huge_step():
    out = implicit_euler_step(linear_field(np.array([[-1.0]])),
                              np.array([1.0]), 10.0)
    assert out[0] == pytest.approx(1.0 / 11.0, rel=1e-14)


def test_zero_step_is_identity():
    x = np.array([2.0, -3.0])
    out = implicit_euler_step(linear_field(M1), x, 0.0)
    np.testing.assert_array_equal(out, x)


def test_stable_linear_decrease_at_h_100():
    """A-stability in action: the step contracts no matter how large h is."""
    lyap = quadratic_lyapunov(np.eye(2))
    f = linear_field(M1)
    x = np.array([5.0, 2.0])
    y = implicit_euler_step(f, x, 100.0)
    assert lyap(y) < lyap(x)
    assert convex_decrease_check(lyap, f, x, 100.0)


def test_unconditional_decrease_random_steps():
    rng = np.random.default_rng(31)
    lyap = quadratic_lyapunov(np.eye(2))
    f = linear_field(M1)
    for _ in range(40):
        x = rng.normal(size=2) * rng.uniform(0.1, 20.0)
        h = float(10.0 ** rng.uniform(-3, 3))
        assert convex_decrease_check(lyap, f, x, h)


def test_convex_flag_required():
    lyap = LyapunovFunction(v=lambda x: float(x @ x),
                            grad=lambda x: 2.0 * np.asarray(x))
    with pytest.raises(ConfigurationError):
        convex_decrease_check(lyap, linear_field(M1),
                              np.array([1.0, 0.0]), 0.5)


def test_residual_satisfies_stage_equation():
    system = example_fields()["f2"]
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.normal(size=2)
        h = float(rng.uniform(0.01, 0.5))
        y = implicit_euler_step(system.field, x, h)
        res = y - x - h * system.field(y)
        assert np.linalg.norm(res) <= 1e-10 * (1.0 + np.linalg.norm(x))


def test_newton_and_fixed_point_agree_for_small_h():
    f2 = example_fields()["f2"].field
    bare = VectorField(dim=2, f=f2.f)
    x = np.array([0.8, -0.3])
    h = 0.05
    with_jac = implicit_euler_step(f2, x, h)
    without = implicit_euler_step(bare, x, h,
                                  StageSolveConfig(max_iter=200, tol=1e-14))
    np.testing.assert_allclose(with_jac, without, rtol=1e-9)


def test_cubic_damping_rescue_reaches_1e8():
    """Constant-step implicit Euler kills the spurious limit cycle."""
    f = example_fields()["f2"].field
    x = np.array([1.0, 0.0])
    hit = None
    for k in range(1, 2001):
        x = implicit_euler_step(f, x, 0.2)
        if np.linalg.norm(x) < 1e-8:
            hit = k
            break
    assert hit is not None
    assert hit == 881


class TestGradientSystemPhi:
    def test_unit_quadratic(self):
        # V = |x|^2 / 2 gives f = -x with L = gamma = 1, so phi = lam / 2.
        lyap = quadratic_lyapunov(np.eye(2) / 2)
        f = linear_field(-np.eye(2))
        phi = gradient_system_phi(lyap, f, np.array([1.0, 1.0]), 0.5, 1.0)
        assert phi == pytest.approx(0.25)

    def test_sampled_fallback_is_conservative(self):
        # Without analytic constants the sampled estimates inflate the
        # denominator, so the bound can only shrink.
        lyap = quadratic_lyapunov(np.eye(2) / 2)
        f = gradient_system_field(lyap, 2)
        phi = gradient_system_phi(lyap, f, np.array([1.0, 1.0]), 0.5, 1.0)
        assert 0.0 < phi <= 0.25

    def test_r_clamps(self):
        lyap = quadratic_lyapunov(np.eye(2) / 2)
        f = gradient_system_field(lyap, 2)
        phi = gradient_system_phi(lyap, f, np.array([1.0, 1.0]), 0.5, 0.01)
        assert phi == 0.01

    def test_origin_returns_r(self):
        lyap = quadratic_lyapunov(np.eye(2) / 2)
        f = gradient_system_field(lyap, 2)
        assert gradient_system_phi(lyap, f, np.zeros(2), 0.5, 3.0) == 3.0

    def test_descent_direction(self):
        lyap = quadratic_lyapunov(np.array([[2.0, 0.0], [0.0, 0.5]]))
        f = gradient_system_field(lyap, 2)
        x = np.array([1.0, -1.0])
        np.testing.assert_allclose(f(x), -lyap.gradient(x))


def test_midpoint_convexity_spot_check():
    rng = np.random.default_rng(2)
    quad = quadratic_lyapunov(np.array([[1.0, 0.2], [0.2, 2.0]]))
    assert check_midpoint_convexity(quad, rng)

    # w-shaped double well fails midpoint convexity between the wells
    well = LyapunovFunction(
        v=lambda x: float((x[0] ** 2 - 1.0) ** 2 + x[1] ** 2),
        grad=lambda x: np.array([4.0 * x[0] * (x[0] ** 2 - 1.0),
                                 2.0 * x[1]]),
    )
    assert not check_midpoint_convexity(well, rng)
