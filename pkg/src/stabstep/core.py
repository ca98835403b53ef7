"""Vector fields, Runge-Kutta tableaus, and hybrid step-sequence trajectories.

The integration model is deliberately simple: a trajectory is a sequence of
nodes (tau_i, x_i) produced by x_{i+1} = x_i + h_i * F(h_i, x_i), where F is
the increment function of a Runge-Kutta scheme and the step h_i comes from a
state-feedback controller, optionally shrunk by a nonnegative input signal
u(tau_i) through h_i = h_base * exp(-u(tau_i)).  Between nodes the state is
interpolated linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

Array = np.ndarray


class StageSolveError(RuntimeError):
    """Implicit stage equations could not be solved (step too large)."""


class OracleError(RuntimeError):
    """Reference solution could not reach the requested accuracy."""


class ControllerError(RuntimeError):
    """A step controller produced no admissible step."""


class ConfigurationError(ValueError):
    """A required estimator, bound, or flag is missing or inconsistent."""


# ---------------------------------------------------------------------------
# vector fields


@dataclass(frozen=True)
class VectorField:
    """Right-hand side of an autonomous ODE x' = f(x).

    Parameters
    ----------
    dim : int
        State dimension.
    f : callable
        Maps a state vector of shape (dim,) to the derivative vector.
    jacobian : callable, optional
        Df(x); enables Newton iterations for implicit stage equations.
    gamma : callable, optional
        Nondecreasing growth bound with |f(x)| <= |x| * gamma(|x|).
        Takes the scalar |x|.
    local_lipschitz : callable, optional
        L(x) dominating the Lipschitz constant of f on the ball
        {y : |y - x| <= lam*|x|} for the ball fraction lam in use.
    linear_matrix : ndarray, optional
        Set when f(x) = A x; unlocks direct linear solves for implicit steps.
    """

    dim: int
    f: Callable[[Array], Array]
    jacobian: Optional[Callable[[Array], Array]] = None
    gamma: Optional[Callable[[float], float]] = None
    local_lipschitz: Optional[Callable[[Array], float]] = None
    linear_matrix: Optional[Array] = None

    def __call__(self, x: Array) -> Array:
        return np.asarray(self.f(np.asarray(x, dtype=float)), dtype=float)

    @property
    def has_certified_bounds(self) -> bool:
        """True when gamma and local_lipschitz were supplied analytically."""
        return self.gamma is not None and self.local_lipschitz is not None


def linear_field(a: Array) -> VectorField:
    """Wrap the linear field f(x) = A x with exact growth and Lipschitz bounds."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError("linear field needs a square matrix")
    norm_a = float(np.linalg.norm(a, 2))
    return VectorField(
        dim=a.shape[0],
        f=lambda x: a @ x,
        jacobian=lambda x: a,
        gamma=lambda s: norm_a,
        local_lipschitz=lambda x: norm_a,
        linear_matrix=a,
    )


# ---------------------------------------------------------------------------
# Runge-Kutta tableaus


@dataclass(frozen=True)
class ButcherTableau:
    """Runge-Kutta coefficients (a, b) with the scheme's classical order.

    The stage equations are Y_i = x + h * sum_j a[i, j] f(Y_j) and the
    increment is F(h, x) = sum_i b[i] f(Y_i).  Consistency (sum(b) == 1)
    is enforced at construction; the `explicit` flag is derived from the
    strict lower-triangularity of `a`.
    """

    name: str
    a: Array
    b: Array
    order: int

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if a.shape != (b.size, b.size):
            raise ConfigurationError("tableau shapes disagree")
        if abs(b.sum() - 1.0) > 1e-12:
            raise ConfigurationError("tableau weights must sum to 1")
        if self.order < 1:
            raise ConfigurationError("order must be a positive integer")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def stages(self) -> int:
        return self.b.size

    @property
    def explicit(self) -> bool:
        return bool(np.all(np.triu(self.a) == 0.0))

    @property
    def a_norm(self) -> float:
        """Max absolute row sum of a; the stage-contraction radius scale."""
        return float(np.max(np.sum(np.abs(self.a), axis=1)))


EULER = ButcherTableau("euler", [[0.0]], [1.0], order=1)
IMPLICIT_EULER = ButcherTableau("implicit-euler", [[1.0]], [1.0], order=1)
HEUN = ButcherTableau("heun", [[0.0, 0.0], [1.0, 0.0]], [0.5, 0.5], order=2)
IMPROVED_POLYGON = ButcherTableau(
    "improved-polygon", [[0.0, 0.0], [0.5, 0.0]], [0.0, 1.0], order=2
)
KUTTA3 = ButcherTableau(
    "kutta3",
    [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [-1.0, 2.0, 0.0]],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    order=3,
)
RK4 = ButcherTableau(
    "rk4",
    [
        [0.0, 0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0, 0.0],
        [0.0, 0.5, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ],
    [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    order=4,
)

TABLEAUS = {
    t.name: t for t in (EULER, IMPLICIT_EULER, HEUN, IMPROVED_POLYGON, KUTTA3, RK4)
}


# ---------------------------------------------------------------------------
# configuration records


@dataclass(frozen=True)
class StepBoundConfig:
    """Knobs for state-dependent step bounds and trajectory termination.

    r is the hard step cap, lambda_ball the ball fraction in (0, 1) used by
    the default bound and by numeric Lipschitz estimation, u_input an optional
    nonnegative signal that shrinks realized steps by exp(-u(tau)).
    """

    r: float = 1.0
    lambda_ball: float = 0.5
    u_input: Optional[Callable[[float], float]] = None
    norm_floor: float = 1e-14
    numeric_fallback: bool = True
    fallback_samples: int = 64

    def __post_init__(self):
        if not self.r > 0:
            raise ConfigurationError("r must be positive")
        if not 0.0 < self.lambda_ball < 1.0:
            raise ConfigurationError("lambda_ball must lie in (0, 1)")


@dataclass(frozen=True)
class StageSolveConfig:
    """Iteration budget and relative tolerance for implicit stage solves."""

    max_iter: int = 50
    tol: float = 1e-12
    damping: float = 1.0


# ---------------------------------------------------------------------------
# numeric estimators (sampled, conservative, not certified)


def _unit_ball_points(dim: int, n: int) -> Array:
    """Deterministic low-discrepancy points in the closed unit ball."""
    eng = qmc.Halton(d=dim, seed=0)
    pts = 2.0 * eng.random(n) - 1.0
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    return pts / np.maximum(norms, 1.0)


def estimate_local_lipschitz(
    field: VectorField, x: Array, lam: float, n_samples: int = 64
) -> float:
    """Sampled two-point Lipschitz quotient of f over {y : |y-x| <= lam|x|}.

    The maximum quotient over all sample pairs is inflated by a factor of 2.
    The result is a heuristic, not a certified bound.
    """
    x = np.asarray(x, dtype=float)
    radius = lam * float(np.linalg.norm(x))
    if radius == 0.0:
        radius = lam  # degenerate ball at the origin; probe a unit-scale box
    pts = x + radius * _unit_ball_points(field.dim, n_samples)
    pts = np.vstack([x, pts])
    vals = np.array([field(p) for p in pts])
    diff_x = pts[:, None, :] - pts[None, :, :]
    diff_f = vals[:, None, :] - vals[None, :, :]
    dx = np.linalg.norm(diff_x, axis=2)
    df = np.linalg.norm(diff_f, axis=2)
    mask = dx > 1e-12 * max(1.0, float(np.linalg.norm(x)))
    if not mask.any():
        return 0.0
    return 2.0 * float(np.max(df[mask] / dx[mask]))


def estimate_gamma(field: VectorField, s: float, n_samples: int = 64) -> float:
    """Sampled bound g with |f(y)| <= |y| g(s) for |y| <= s, inflated by 2."""
    if s <= 0.0:
        s = 1.0
    dirs = _unit_ball_points(field.dim, n_samples)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = dirs / np.maximum(norms, 1e-12)
    best = 0.0
    for scale in (s, 0.5 * s, 0.25 * s, 0.125 * s):
        for d in dirs:
            y = scale * d
            ny = float(np.linalg.norm(y))
            if ny > 0:
                best = max(best, float(np.linalg.norm(field(y))) / ny)
    return 2.0 * best


def _lipschitz_at(field: VectorField, x: Array, cfg: StepBoundConfig) -> float:
    if field.local_lipschitz is not None:
        return float(field.local_lipschitz(np.asarray(x, dtype=float)))
    if not cfg.numeric_fallback:
        raise ConfigurationError(
            "field has no local_lipschitz and numeric fallback is disabled"
        )
    return estimate_local_lipschitz(field, x, cfg.lambda_ball, cfg.fallback_samples)


def _gamma_at(field: VectorField, s: float, cfg: StepBoundConfig) -> float:
    if field.gamma is not None:
        return float(field.gamma(s))
    if not cfg.numeric_fallback:
        raise ConfigurationError("field has no gamma and numeric fallback is disabled")
    return estimate_gamma(field, s, cfg.fallback_samples)


# ---------------------------------------------------------------------------
# increment function


def rk_increment(
    tableau: ButcherTableau,
    field: VectorField,
    x: Array,
    h: float,
    solve_cfg: Optional[StageSolveConfig] = None,
) -> Array:
    """Increment F(h, x) of the scheme, with F(0, x) = f(x).

    Explicit tableaus evaluate the stages sequentially.  Implicit tableaus
    solve the stage system by Newton iteration when the field has a Jacobian
    and by damped fixed-point iteration otherwise; failure to converge within
    the iteration budget raises StageSolveError.
    """
    x = np.asarray(x, dtype=float)
    if h < 0:
        raise ConfigurationError("step must be nonnegative")
    if h == 0.0:
        return field(x)
    s, n = tableau.stages, field.dim
    a, b = tableau.a, tableau.b

    if tableau.explicit:
        k = np.zeros((s, n))
        for i in range(s):
            yi = x + h * (a[i, :i] @ k[:i]) if i else x.copy()
            k[i] = field(yi)
        return b @ k

    cfg = solve_cfg or StageSolveConfig()
    tol = cfg.tol * (1.0 + float(np.linalg.norm(x)))
    y = np.tile(x, (s, 1))

    if field.jacobian is not None:
        for _ in range(cfg.max_iter):
            fy = np.array([field(yi) for yi in y])
            res = y - x - h * (a @ fy)
            if float(np.max(np.linalg.norm(res, axis=1))) <= tol:
                return b @ fy
            jac = np.eye(s * n)
            for i in range(s):
                for j in range(s):
                    if a[i, j] != 0.0:
                        block = field.jacobian(y[j])
                        jac[i * n : (i + 1) * n, j * n : (j + 1) * n] -= (
                            h * a[i, j] * np.asarray(block, dtype=float)
                        )
            try:
                delta = np.linalg.solve(jac, res.ravel())
            except np.linalg.LinAlgError as exc:
                raise StageSolveError(f"singular stage Jacobian at h={h}") from exc
            y = y - delta.reshape(s, n)
            if not np.all(np.isfinite(y)):
                raise StageSolveError(f"stage Newton iteration diverged at h={h}")
        raise StageSolveError(f"stage Newton iteration stalled at h={h}")

    prev = math.inf
    for _ in range(cfg.max_iter):
        fy = np.array([field(yi) for yi in y])
        target = x + h * (a @ fy)
        shift = float(np.max(np.linalg.norm(target - y, axis=1)))
        if not math.isfinite(shift) or shift > max(10.0 * prev, 1e6):
            raise StageSolveError(
                f"stage fixed-point iteration diverged at h={h} (residual {shift:.3e})"
            )
        y = y + cfg.damping * (target - y)
        if shift <= tol:
            return b @ np.array([field(yi) for yi in y])
        prev = shift
    raise StageSolveError(
        f"stage fixed-point iteration did not converge within "
        f"{cfg.max_iter} iterations at h={h} (residual {prev:.3e})"
    )


def default_phi(
    field: VectorField, tableau: ButcherTableau, cfg: StepBoundConfig, x: Array
) -> float:
    """Step bound guaranteeing solvable, ball-confined stage equations.

    Returns min(lam / (|A| (L(x) + g(|x|))), r) where |A| is the tableau's
    max absolute row sum; for |A| = 0 (explicit Euler) the bound is just r.
    """
    anorm = tableau.a_norm
    if anorm == 0.0:
        return cfg.r
    x = np.asarray(x, dtype=float)
    nx = float(np.linalg.norm(x))
    if nx < cfg.norm_floor:
        return cfg.r
    lip = _lipschitz_at(field, x, cfg)
    grow = _gamma_at(field, nx, cfg)
    denom = anorm * (lip + grow)
    if denom <= 0.0:
        return cfg.r
    return min(cfg.lambda_ball / denom, cfg.r)


def growth_bound(
    field: VectorField, tableau: ButcherTableau, cfg: StepBoundConfig
) -> Callable[[float], float]:
    """Callable M with |x + h F(h, x)| <= |x| M(|x|) for h in [0, default_phi(x)].

    Valid because default_phi confines every stage to the lambda-ball
    around x, so each stage derivative is bounded through gamma at the
    inflated radius (1 + lambda)|x|, and h never exceeds r.
    """
    babs = float(np.sum(np.abs(tableau.b)))
    lam = cfg.lambda_ball

    def bound(y: float) -> float:
        g = _gamma_at(field, (1.0 + lam) * y, cfg)
        return 1.0 + cfg.r * (1.0 + lam) * babs * g

    return bound


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class HybridTrajectory:
    """Node sequence of an adaptive run: times, states, and steps taken.

    tau has shape (N,), states (N, dim), steps (N-1,) with
    tau[i+1] == tau[i] + steps[i] exactly (the times are built by the same
    additions).  certificates, when present, holds one per-step record.
    """

    tau: Array
    states: Array
    steps: Array
    certificates: tuple = ()

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        steps = np.asarray(self.steps, dtype=float)
        if states.shape[0] != tau.size or steps.size != tau.size - 1:
            raise ConfigurationError("trajectory arrays have inconsistent lengths")
        if steps.size and not np.all(steps > 0):
            raise ConfigurationError("steps must be positive")
        if not np.array_equal(tau[1:], tau[:-1] + steps):
            raise ConfigurationError("node times must accumulate the steps exactly")
        if self.certificates and len(self.certificates) != steps.size:
            raise ConfigurationError("one certificate per step expected")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "steps", steps)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def final_time(self) -> float:
        return float(self.tau[-1])

    @property
    def final_state(self) -> Array:
        return self.states[-1]

    def state_at(self, t: float) -> Array:
        """Piecewise-linear interpolant; exact at the nodes."""
        if t < self.tau[0] or t > self.tau[-1]:
            raise ValueError("time outside the trajectory span")
        i = int(np.searchsorted(self.tau, t, side="right") - 1)
        if i >= self.tau.size - 1:
            return self.states[-1].copy()
        w = (t - self.tau[i]) / self.steps[i]
        return self.states[i] + w * (self.states[i + 1] - self.states[i])

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)


def write_trajectory_csv(traj: HybridTrajectory, path) -> None:
    """Rows tau,h,x_0,...,x_{n-1}; the final row carries h = 0."""
    cols = ",".join(f"x_{j}" for j in range(traj.dim))
    with open(path, "w") as fh:
        fh.write(f"tau,h,{cols}\n")
        for i in range(traj.tau.size):
            h = traj.steps[i] if i < traj.steps.size else 0.0
            state = ",".join(f"{v:.17g}" for v in traj.states[i])
            fh.write(f"{traj.tau[i]:.17g},{h:.17g},{state}\n")


class ConstantController:
    """Always proposes the same base step."""

    def __init__(self, h: float):
        if h <= 0:
            raise ConfigurationError("constant step must be positive")
        self.h = float(h)

    def __call__(self, x: Array, tau: float) -> float:
        return self.h


def advance(
    tableau: ButcherTableau,
    field: VectorField,
    controller,
    x0: Array,
    t_end: float,
    cfg: Optional[StepBoundConfig] = None,
    max_steps: Optional[int] = None,
    solve_cfg: Optional[StageSolveConfig] = None,
    certifier: Optional[Callable[[Array, float], object]] = None,
) -> HybridTrajectory:
    """Run the hybrid stepping loop until t_end, a norm floor, or max_steps.

    The controller is called as controller(x, tau) and returns either a base
    step or a (base step, certificate) pair.  When cfg.u_input is set the
    realized step is base * exp(-u(tau)).  An optional certifier(x, h) is
    invoked per step to attach decrease certificates.
    """
    cfg = cfg or StepBoundConfig()
    x = np.asarray(x0, dtype=float).copy()
    tau = 0.0
    taus = [tau]
    states = [x.copy()]
    steps: list[float] = []
    certs: list = []

    while tau < t_end and float(np.linalg.norm(x)) >= cfg.norm_floor:
        if max_steps is not None and len(steps) >= max_steps:
            break
        out = controller(x, tau)
        cert = None
        if isinstance(out, tuple):
            h_base, cert = out
        else:
            h_base = out
        h_base = float(h_base)
        if not h_base > 0 or not math.isfinite(h_base):
            raise ControllerError(f"controller proposed step {h_base} at tau={tau}")
        h = h_base
        if cfg.u_input is not None:
            h = h_base * math.exp(-float(cfg.u_input(tau)))
        incr = rk_increment(tableau, field, x, h, solve_cfg)
        if cert is None and certifier is not None:
            cert = certifier(x, h)
        x = x + h * incr
        tau = tau + h
        taus.append(tau)
        states.append(x.copy())
        steps.append(h)
        certs.append(cert)

    return HybridTrajectory(
        tau=np.array(taus),
        states=np.array(states),
        steps=np.array(steps),
        certificates=tuple(certs) if certifier is not None or any(
            c is not None for c in certs
        ) else (),
    )


# ---------------------------------------------------------------------------
# reference solutions


@dataclass(frozen=True)
class ReferenceSolution:
    """Dense sample of the exact flow, accurate to the requested tolerance."""

    tau: Array
    states: Array
    error_estimate: float

    @property
    def final_state(self) -> Array:
        return self.states[-1]

    def at(self, t: float) -> Array:
        i = int(np.clip(np.searchsorted(self.tau, t, side="right") - 1, 0,
                        self.tau.size - 2))
        span = self.tau[i + 1] - self.tau[i]
        w = 0.0 if span == 0 else (t - self.tau[i]) / span
        return self.states[i] + w * (self.states[i + 1] - self.states[i])


def _rk4_grid(field: VectorField, x0: Array, t_end: float, n: int) -> Array:
    h = t_end / n
    out = np.empty((n + 1, x0.size))
    out[0] = x0
    x = x0.copy()
    for i in range(n):
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = x
    return out


def reference_solve(
    field: VectorField, x0: Array, t_end: float, tol: float = 1e-10
) -> ReferenceSolution:
    """Classical fourth-order solve with step halving until the Richardson
    estimate of the final-state error drops below tol."""
    x0 = np.asarray(x0, dtype=float)
    if t_end < 0:
        raise OracleError("reference solve needs t_end >= 0")
    if t_end == 0.0:
        return ReferenceSolution(np.array([0.0]), x0[None, :].copy(), 0.0)
    n = max(1, int(math.ceil(t_end / 0.1)))
    coarse = _rk4_grid(field, x0, t_end, n)
    while True:
        fine = _rk4_grid(field, x0, t_end, 2 * n)
        err = float(np.linalg.norm(fine[-1] - coarse[-1])) / 15.0
        if err < tol:
            grid = np.linspace(0.0, t_end, 2 * n + 1)
            return ReferenceSolution(grid, fine, err)
        n *= 2
        coarse = fine
        if t_end / n < 1e-12:
            raise OracleError(
                f"reference step underflow before reaching tol={tol:g}"
            )


def reference_state(
    field: VectorField, x0: Array, t: float, tol: float = 1e-12
) -> Array:
    """Exact-flow state z(t, x0) to tolerance tol."""
    return reference_solve(field, x0, t, tol).final_state


def reference_at_times(
    field: VectorField, x0: Array, times: Sequence[float], tol: float = 1e-10
) -> Array:
    """Exact-flow states at increasing times, integrated segment by segment."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return np.empty((0, np.asarray(x0).size))
    if times[0] != 0.0 or np.any(np.diff(times) < 0):
        raise OracleError("times must start at 0 and be nondecreasing")
    seg_tol = tol / max(1, times.size)
    out = np.empty((times.size, np.asarray(x0).size))
    z = np.asarray(x0, dtype=float).copy()
    out[0] = z
    for i in range(times.size - 1):
        dt = float(times[i + 1] - times[i])
        if dt > 0:
            z = reference_solve(field, z, dt, seg_tol).final_state
        out[i + 1] = z
    return out
