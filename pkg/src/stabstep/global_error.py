"""Global discretization error: measurement, bounds, and the budget step rule.

The deviation e(tau) between the exact flow and the hybrid numerical
trajectory admits two bounds in terms of the running defect supremum D:
a finite-horizon bound (D/L)(e^{L tau} - 1) and a horizon-free bound
(D/L)^{ls/(ls+L)} (2a(|x0|))^{L/(ls+L)} with l the decrease fraction and
s the exact decay rate.  Inverting the latter for a target eps yields a
step rule that loosens as tau grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    Array,
    ButcherTableau,
    ConfigurationError,
    HybridTrajectory,
    VectorField,
    reference_at_times,
    reference_solve,
    rk_increment,
)


@dataclass(frozen=True)
class ErrorBudget:
    """Constants of the error-budget rule for one initial condition.

    a_gain is the K-infinity envelope gain of the exact flow,
    l_of_x0 the increment Lipschitz constant, k_of_x0 the defect constant
    (|defect| <= K h^p), p the scheme order, x0_norm the initial-state norm
    the gain is evaluated at.
    """

    epsilon: float
    sigma: float
    lam: float
    a_gain: Callable[[float], float]
    l_of_x0: float
    k_of_x0: float
    p: int
    x0_norm: float

    def __post_init__(self):
        for name in ("epsilon", "sigma", "lam", "l_of_x0", "k_of_x0", "x0_norm"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.p < 1:
            raise ConfigurationError("p must be a positive integer")
        if float(self.a_gain(0.0)) != 0.0:
            raise ConfigurationError("a_gain(0) must be 0")

    @property
    def q(self) -> float:
        return self.l_of_x0 / self.sigma


def global_error(
    traj: HybridTrajectory,
    field: VectorField,
    x0: Optional[Array] = None,
    tol: float = 1e-10,
) -> Array:
    """Norms |z(tau_i) - x_i| against the reference flow at every node."""
    if x0 is not None and not np.allclose(traj.states[0], x0):
        raise ConfigurationError("x0 disagrees with the trajectory start")
    z = reference_at_times(field, traj.states[0], traj.tau, tol)
    return np.linalg.norm(z - traj.states, axis=1)


def error_bound_finite_time(budget: ErrorBudget, d_i: float, tau: float) -> float:
    """Horizon-dependent bound (D/L)(e^{L tau} - 1)."""
    if d_i < 0:
        raise ConfigurationError("defect supremum must be nonnegative")
    big_l = budget.l_of_x0
    return (d_i / big_l) * math.expm1(big_l * tau)


def error_bound(budget: ErrorBudget, d_i: float, tau: float | None = None) -> float:
    """Horizon-free bound (D/L)^{ls/(ls+L)} (2a(|x0|))^{L/(ls+L)}.

    tau is accepted for signature symmetry but unused: the bound holds
    uniformly in time.
    """
    if d_i < 0:
        raise ConfigurationError("defect supremum must be nonnegative")
    if d_i == 0.0:
        return 0.0
    big_l = budget.l_of_x0
    ls = budget.lam * budget.sigma
    alpha = ls / (ls + big_l)
    amp = 2.0 * float(budget.a_gain(budget.x0_norm))
    return (d_i / big_l) ** alpha * amp ** (1.0 - alpha)


def order_reduction_exponent(budget: ErrorBudget) -> float:
    """The h-exponent ls/(ls + L) the horizon-free bound scales with."""
    ls = budget.lam * budget.sigma
    return ls / (ls + budget.l_of_x0)


def error_budget_step(budget: ErrorBudget, tau_i: float, phi_at_x: float) -> float:
    """Step rule keeping |e(tau_i)| <= epsilon, capped by phi.

    min( (2L/K)^{1/p} e^{(sigma/p) tau} (2 a(|x0|)/eps)^{-(q+lam)/(p lam)},
         phi ); monotone increasing in tau.
    """
    if phi_at_x <= 0:
        raise ConfigurationError("phi cap must be positive")
    big_l, big_k, p = budget.l_of_x0, budget.k_of_x0, budget.p
    ratio = 2.0 * float(budget.a_gain(budget.x0_norm)) / budget.epsilon
    if ratio <= 0.0:
        return phi_at_x
    expo = -(budget.q + budget.lam) / (p * budget.lam)
    rule = ((2.0 * big_l / big_k) ** (1.0 / p)
            * math.exp(budget.sigma * tau_i / p)
            * ratio ** expo)
    return min(rule, phi_at_x)


def euler_budget_step(budget: ErrorBudget, tau_i: float, phi_at_x: float) -> float:
    """The first-order instance (4/L) e^{sigma tau} (2a(|x0|)/eps)^{-(q+lam)/lam}.

    Requires p = 1; coincides with error_budget_step when K = L^2/2, the
    defect constant the first-order derivation produces.
    """
    if budget.p != 1:
        raise ConfigurationError("the first-order rule needs p = 1")
    if phi_at_x <= 0:
        raise ConfigurationError("phi cap must be positive")
    big_l = budget.l_of_x0
    ratio = 2.0 * float(budget.a_gain(budget.x0_norm)) / budget.epsilon
    if ratio <= 0.0:
        return phi_at_x
    rule = ((4.0 / big_l)
            * math.exp(budget.sigma * tau_i)
            * ratio ** (-(budget.q + budget.lam) / budget.lam))
    return min(rule, phi_at_x)


def defect(
    field: VectorField,
    tableau: ButcherTableau,
    x: Array,
    h: float,
    tol: float = 1e-13,
) -> float:
    """Local defect norm |(z(h,x) - x)/h - F(h,x)|."""
    if h <= 0:
        raise ConfigurationError("defect needs h > 0")
    x = np.asarray(x, dtype=float)
    z = reference_solve(field, x, h, tol).final_state
    incr = rk_increment(tableau, field, x, h)
    return float(np.linalg.norm((z - x) / h - incr))


def estimate_increment_lipschitz(
    field: VectorField,
    tableau: ButcherTableau,
    x0: Array,
    radius: float,
    r: float,
    n_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Sampled bound L with |F(h,z) - F(h,x)| <= L|z - x| near x0.

    Quotients are maximized over random pairs in the ball of the given
    radius and steps h in [0, r], then inflated by 2.  Heuristic only.
    """
    rng = rng or np.random.default_rng(0)
    x0 = np.asarray(x0, dtype=float)
    best = 0.0
    hs = [0.0, 0.25 * r, 0.5 * r, 0.75 * r, r]
    for _ in range(n_samples):
        u = rng.standard_normal(field.dim)
        w = rng.standard_normal(field.dim)
        a = x0 + radius * u / max(np.linalg.norm(u), 1e-12) * rng.random()
        b = x0 + radius * w / max(np.linalg.norm(w), 1e-12) * rng.random()
        gap = float(np.linalg.norm(a - b))
        if gap < 1e-10:
            continue
        for h in hs:
            fa = rk_increment(tableau, field, a, h)
            fb = rk_increment(tableau, field, b, h)
            best = max(best, float(np.linalg.norm(fa - fb)) / gap)
    return 2.0 * best


def compliant_steps(
    budget: ErrorBudget,
    phi_cap: float,
    t_end: float,
    rng: np.random.Generator,
    u_range: tuple[float, float] = (0.5, 1.0),
    dtau_block: float = 0.05,
) -> Array:
    """Random step sequence with every h_i within the budget rule at tau_i.

    Steps are generated in blocks: the rule bound is frozen at the block's
    start time and scaled by uniform draws from u_range.  Because the rule
    is monotone increasing in tau, the frozen bound stays admissible for
    every step inside the block.
    """
    lo, hi = u_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ConfigurationError("u_range must satisfy 0 < lo <= hi <= 1")
    chunks = []
    tau = 0.0
    while tau < t_end:
        bound = error_budget_step(budget, tau, phi_cap)
        block_end = min(tau + dtau_block, t_end)
        n_est = max(1, int(math.ceil((block_end - tau) / (lo * bound))) + 1)
        draws = bound * rng.uniform(lo, hi, size=n_est)
        times = tau + np.cumsum(draws)
        keep = int(np.searchsorted(times, block_end, side="left")) + 1
        draws = draws[:keep]
        chunks.append(draws)
        tau = float(times[min(keep, times.size) - 1])
    return np.concatenate(chunks)


@dataclass(frozen=True)
class ErrorReport:
    """Per-node error audit rows (tau, e_norm, bound_7_4, bound_7_6, rule)."""

    rows: tuple
    max_error: float
    bounds_hold: bool

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("tau,e_norm,bound_7_4,bound_7_6,rule_step\n")
            for tau, e, b4, b6, rule in self.rows:
                fh.write(f"{tau:.17g},{e:.17g},{b4:.17g},{b6:.17g},{rule:.17g}\n")


def error_report(
    traj: HybridTrajectory,
    field: VectorField,
    tableau: ButcherTableau,
    budget: ErrorBudget,
    phi_cap: float,
    oracle_tol: float = 1e-10,
) -> ErrorReport:
    """Measure the error at every node and tabulate it against both bounds
    and the rule value; bounds use the running defect supremum."""
    errors = global_error(traj, field, tol=oracle_tol)
    rows = []
    d_sup = 0.0
    ok = True
    for i in range(traj.tau.size):
        tau_i = float(traj.tau[i])
        if i > 0:
            h_prev = float(traj.steps[i - 1])
            d_sup = max(
                d_sup, defect(field, tableau, traj.states[i - 1], h_prev)
            )
        b4 = error_bound_finite_time(budget, d_sup, tau_i)
        b6 = error_bound(budget, d_sup)
        rule = error_budget_step(budget, tau_i, phi_cap)
        e_i = float(errors[i])
        if e_i > b4 + 1e-9 * max(1.0, b4):
            ok = False
        rows.append((tau_i, e_i, b4, b6, rule))
    return ErrorReport(rows=tuple(rows), max_error=float(np.max(errors)),
                       bounds_hold=ok)
