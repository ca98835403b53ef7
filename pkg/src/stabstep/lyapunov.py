"""Decrease-test step controllers and trajectory certification.

A step h at state x is accepted when

    V(x + h F(h, x)) <= V(x) + lam * h * grad V(x) . f(x)

for a decrease fraction lam in (0, 1).  Controllers either search for such an
h by halving or compute one directly from curvature information (explicit
Euler with a Hessian, linear systems with quadratic V).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .core import (
    Array,
    ButcherTableau,
    ConfigurationError,
    ControllerError,
    EULER,
    HybridTrajectory,
    StageSolveConfig,
    StageSolveError,
    VectorField,
    _unit_ball_points,
    reference_solve,
    rk_increment,
)

_SLACK = 1e-15


@dataclass(frozen=True)
class LyapunovFunction:
    """Positive definite V with its gradient and optional curvature data.

    decrease_rate, when given, is the Lie derivative x -> grad V(x) . f(x)
    of the paired field; certify_trajectory can then run without the field.
    """

    v: Callable[[Array], float]
    grad: Callable[[Array], Array]
    hess: Optional[Callable[[Array], Array]] = None
    convex: bool = False
    decrease_rate: Optional[Callable[[Array], float]] = None

    def __call__(self, x: Array) -> float:
        return float(self.v(np.asarray(x, dtype=float)))

    def gradient(self, x: Array) -> Array:
        return np.asarray(self.grad(np.asarray(x, dtype=float)), dtype=float)


def quadratic_lyapunov(p: Array) -> LyapunovFunction:
    """V(x) = x' P x for symmetric positive semidefinite P."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ConfigurationError("P must be a square matrix")
    if not np.allclose(p, p.T, atol=1e-12):
        raise ConfigurationError("P must be symmetric")
    convex = bool(np.all(np.linalg.eigvalsh(p) >= -1e-12))
    return LyapunovFunction(
        v=lambda x: float(x @ p @ x),
        grad=lambda x: 2.0 * (p @ x),
        hess=lambda x: 2.0 * p,
        convex=convex,
    )


@dataclass(frozen=True)
class DecreaseCertificate:
    """Outcome of one decrease test; `accepted` compares lhs against rhs
    with a relative roundoff slack so exact boundary steps pass."""

    x: Array
    h: float
    lhs: float
    rhs: float
    accepted: bool
    halvings: int = 0
    reason: str = ""


def _lie_derivative(lyap: LyapunovFunction, field: VectorField, x: Array) -> float:
    return float(lyap.gradient(x) @ field(x))


def decrease_test(
    lyap: LyapunovFunction,
    tableau: ButcherTableau,
    field: VectorField,
    x: Array,
    h: float,
    lam: float,
    solve_cfg: Optional[StageSolveConfig] = None,
) -> DecreaseCertificate:
    """Evaluate the Lyapunov decrease condition for one candidate step.

    A stage-solve failure (implicit tableau, step too large) is reported as
    a rejection with the reason recorded, not an exception.
    """
    if h <= 0:
        raise ConfigurationError("decrease test needs h > 0")
    if not 0.0 < lam < 1.0:
        raise ConfigurationError("lam must lie in (0, 1)")
    x = np.asarray(x, dtype=float)
    rhs = lyap(x) + lam * h * _lie_derivative(lyap, field, x)
    try:
        incr = rk_increment(tableau, field, x, h, solve_cfg)
    except StageSolveError as exc:
        return DecreaseCertificate(
            x=x, h=h, lhs=float("nan"), rhs=rhs, accepted=False, reason=str(exc)
        )
    lhs = lyap(x + h * incr)
    accepted = lhs <= rhs + _SLACK * max(1.0, abs(rhs))
    return DecreaseCertificate(x=x, h=h, lhs=lhs, rhs=rhs, accepted=accepted)


def halving_controller(
    lyap: LyapunovFunction,
    tableau: ButcherTableau,
    field: VectorField,
    x: Array,
    h_init: float,
    lam: float,
    max_halvings: int = 40,
    solve_cfg: Optional[StageSolveConfig] = None,
) -> DecreaseCertificate:
    """First accepted step in {h_init, h_init/2, ...} with its halving count.

    Exhausting max_halvings raises ControllerError: either h_init was
    absurdly large or the Lyapunov pairing is invalid near x.
    """
    if h_init <= 0:
        raise ConfigurationError("h_init must be positive")
    h = float(h_init)
    for k in range(max_halvings + 1):
        cert = decrease_test(lyap, tableau, field, x, h, lam, solve_cfg)
        if cert.accepted:
            return DecreaseCertificate(
                x=cert.x, h=h, lhs=cert.lhs, rhs=cert.rhs,
                accepted=True, halvings=k,
            )
        h *= 0.5
    raise ControllerError(
        f"no accepted step after {max_halvings} halvings from h={h_init}"
    )


# ---------------------------------------------------------------------------
# direct step formulas for the explicit Euler scheme


def _curvature_grid(
    lyap: LyapunovFunction, field: VectorField, x: Array, r: float, h_samples: int
) -> float:
    """max over h in [0, r] of f(x)' H_V(x + h f(x)) f(x), grid-sampled.

    Inflated by 5% unless every sampled value coincides (constant Hessian
    along the ray), in which case the grid maximum is exact.
    """
    if lyap.hess is None:
        raise ConfigurationError("Hessian required for curvature step bounds")
    if h_samples < 2:
        raise ConfigurationError("need at least 2 grid points")
    fx = field(x)
    vals = np.empty(h_samples)
    for j in range(h_samples):
        hj = r * j / (h_samples - 1)
        vals[j] = fx @ np.asarray(lyap.hess(x + hj * fx), dtype=float) @ fx
    top = float(np.max(vals))
    if float(np.min(vals)) == top:
        return top
    return 1.05 * top


def euler_q_phi(
    lyap: LyapunovFunction,
    field: VectorField,
    x: Array,
    lam: float,
    r: float,
    h_samples: int = 33,
) -> float:
    """Largest explicit-Euler step passing the decrease test by curvature.

    With q(x) the max of f' H_V(x + h f) f over h in [0, r], any
    h <= -2(1-lam) grad V . f / q(x) is accepted; nonpositive q means no
    curvature obstruction and the cap r is returned.
    """
    x = np.asarray(x, dtype=float)
    w = _lie_derivative(lyap, field, x)
    if w >= 0.0:
        if w == 0.0 and float(np.linalg.norm(field(x))) == 0.0:
            return r
        raise ConfigurationError("grad V . f must be negative away from 0")
    q = _curvature_grid(lyap, field, x, r, h_samples)
    if q <= 0.0:
        return r
    return min(2.0 * (1.0 - lam) * (-w) / q, r)


def k1_bound_euler(
    lyap: LyapunovFunction,
    field: VectorField,
    x: Array,
    r: float,
    h_samples: int = 33,
) -> float:
    """Half the grid maximum of f' H_V(x + h f) f over h in [0, r].

    Dominates the second-order term of V(x + hf) - V(x) - h grad V . f;
    exact for constant Hessians, otherwise 5%-inflated.
    """
    x = np.asarray(x, dtype=float)
    if float(np.linalg.norm(field(x))) == 0.0:
        return 0.0
    return 0.5 * _curvature_grid(lyap, field, x, r, h_samples)


def k1_phi(
    lyap: LyapunovFunction,
    field: VectorField,
    x: Array,
    lam: float,
    r: float,
    h_samples: int = 33,
) -> float:
    """Explicit-Euler step from the quadratic remainder bound K_1."""
    x = np.asarray(x, dtype=float)
    w = _lie_derivative(lyap, field, x)
    if w >= 0.0:
        if w == 0.0 and float(np.linalg.norm(field(x))) == 0.0:
            return r
        raise ConfigurationError("grad V . f must be negative away from 0")
    k1 = k1_bound_euler(lyap, field, x, r, h_samples)
    if k1 <= 0.0:
        return r
    return min((1.0 - lam) * (-w) / k1, r)


def linear_phi(a: Array, p: Array, x: Array, lam: float, r: float) -> float:
    """Explicit-Euler step for x' = Ax with V = x'Px, in closed form.

    Requires the decrease direction x'(A'P + PA)x < 0 at the given x; a zero
    denominator (Ax = 0) imposes no restriction and returns r.
    """
    a = np.asarray(a, dtype=float)
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    if float(np.linalg.norm(x)) == 0.0:
        return r
    ax = a @ x
    num = float(x @ (a.T @ p + p @ a) @ x)
    den = float(ax @ p @ ax)
    if num >= 0.0:
        raise ConfigurationError("x'(A'P+PA)x must be negative: A not Hurwitz "
                                 "for this P, or x in a bad direction")
    if den <= 0.0:
        return r
    return min(-(1.0 - lam) * num / den, r)


def order_p_phi(
    lyap: LyapunovFunction,
    tableau: ButcherTableau,
    field: VectorField,
    x: Array,
    lam: float,
    r: float,
    decrease_rate: Optional[Callable[[Array], float]] = None,
    h_samples: int = 9,
    ball_samples: int = 32,
    oracle_tol: float = 1e-12,
) -> float:
    """Sampled order-p step bound for a general tableau.  Not certified.

    Writes x + hF(h,x) = z(h,x) - h*d(h,x) for the defect d and accepts h
    once the Lipschitz error term l_V * C * h^{p+1} is dominated by the
    flow decrease (1-lam) * h * W(x).  C is estimated from a defect grid
    against the reference flow, l_V from gradient samples on a ball.
    """
    x = np.asarray(x, dtype=float)
    w = -(
        decrease_rate(x)
        if decrease_rate is not None
        else (lyap.decrease_rate(x) if lyap.decrease_rate is not None
              else _lie_derivative(lyap, field, x))
    )
    if w <= 0.0:
        raise ConfigurationError("flow decrease rate must be positive at x")
    p = tableau.order
    c_est = 0.0
    for j in range(1, h_samples + 1):
        hj = r * j / h_samples
        try:
            incr = rk_increment(tableau, field, x, hj)
        except StageSolveError:
            continue
        z = reference_solve(field, x, hj, oracle_tol).final_state
        c_est = max(c_est, float(np.linalg.norm(z - x - hj * incr)) / hj ** (p + 1))
    if c_est == 0.0:
        return r
    c_est *= 2.0
    radius = max(float(np.linalg.norm(x)), 1.0)
    pts = x + radius * _unit_ball_points(field.dim, ball_samples)
    l_v = max(float(np.linalg.norm(lyap.gradient(pt))) for pt in pts)
    l_v = max(1.5 * l_v, 1e-30)
    return min(((1.0 - lam) * w / (l_v * c_est)) ** (1.0 / p), r)


# ---------------------------------------------------------------------------
# trajectory certification


@dataclass(frozen=True)
class CertificationReport:
    """Per-step decrease audit of a finished trajectory."""

    ok: bool
    rows: tuple
    first_violation: Optional[int] = None

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("i,tau,V,threshold,accepted,halvings\n")
            for i, tau, v, thr, acc, halv in self.rows:
                fh.write(f"{i},{tau:.17g},{v:.17g},{thr:.17g},"
                         f"{int(acc)},{halv}\n")


def certify_trajectory(
    lyap: LyapunovFunction,
    traj: HybridTrajectory,
    lam: float,
    field: Optional[VectorField] = None,
) -> CertificationReport:
    """Re-check the decrease condition at every recorded step.

    The threshold needs grad V . f at each node; pass the field, or rely on
    lyap.decrease_rate.  Halving counts are copied from the trajectory's
    certificates when present.
    """
    if field is None and lyap.decrease_rate is None:
        raise ConfigurationError(
            "certification needs the field or a decrease_rate on V"
        )

    def rate(x: Array) -> float:
        if field is not None:
            return _lie_derivative(lyap, field, x)
        return float(lyap.decrease_rate(x))

    rows = []
    first_violation = None
    ok = True
    for i in range(traj.steps.size):
        x = traj.states[i]
        h = float(traj.steps[i])
        v_here = lyap(x)
        threshold = v_here + lam * h * rate(x)
        v_next = lyap(traj.states[i + 1])
        accepted = v_next <= threshold + _SLACK * max(1.0, abs(threshold))
        halv = 0
        if traj.certificates:
            cert = traj.certificates[i]
            if isinstance(cert, DecreaseCertificate):
                halv = cert.halvings
        rows.append((i, float(traj.tau[i]), v_here, threshold, accepted, halv))
        if not accepted and first_violation is None:
            first_violation = i
            ok = False
    return CertificationReport(ok=ok, rows=tuple(rows),
                               first_violation=first_violation)


# ---------------------------------------------------------------------------
# controller objects for core.advance


@dataclass
class HalvingController:
    """Start each step from h_init (or a state-dependent cap) and halve
    until the decrease test accepts."""

    lyap: LyapunovFunction
    tableau: ButcherTableau
    field: VectorField
    lam: float
    h_init: float
    max_halvings: int = 40
    initial_cap: Optional[Callable[[Array], float]] = None

    def __call__(self, x: Array, tau: float):
        h0 = self.h_init
        if self.initial_cap is not None:
            h0 = min(h0, float(self.initial_cap(x)))
        cert = halving_controller(
            self.lyap, self.tableau, self.field, x, h0, self.lam,
            self.max_halvings,
        )
        return cert.h, cert


@dataclass
class EulerQController:
    """Explicit-Euler controller using the curvature bound directly."""

    lyap: LyapunovFunction
    field: VectorField
    lam: float
    r: float
    h_samples: int = 33
    attach_certificates: bool = True

    def __call__(self, x: Array, tau: float):
        h = euler_q_phi(self.lyap, self.field, x, self.lam, self.r,
                        self.h_samples)
        if not self.attach_certificates:
            return h
        cert = decrease_test(self.lyap, EULER, self.field, x, h, self.lam)
        return h, cert


@dataclass
class LinearQuadraticController:
    """Closed-form explicit-Euler controller for x' = Ax with V = x'Px."""

    a: Array
    p: Array
    lam: float
    r: float

    def __call__(self, x: Array, tau: float) -> float:
        return linear_phi(self.a, self.p, x, self.lam, self.r)
