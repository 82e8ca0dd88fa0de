"""Dual control side: backward ODE, estimator, cost, and Monte Carlo checks.

For a deterministic control the backward equation has no martingale part
and reduces to ``-dY/dt = A Y + h U`` with ``Y_T = f``.  The checks below
compare estimator errors against control costs on simulated trials.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import expm

from ._validation import as_vector, grid_steps, probability_vector
from .analysis import carre_du_champ
from .exceptions import AbsoluteContinuityViolation, GridMismatch
from .filter import filter_batch, quadratic_form
from .model import HmmModel
from .paths import ObservationGrid, SamplePath, simulate_batch, trial_chunks

# -- controls and the backward ODE ---------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Deterministic control, constant on each grid step."""

    dt: float
    values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control values must be finite")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zero(cls, T, dt):
        return cls(dt, np.zeros(grid_steps(T, dt)))

    @classmethod
    def constant(cls, c, T, dt):
        return cls(dt, np.full(grid_steps(T, dt), float(c)))

    @classmethod
    def sinusoid(cls, T, dt, amplitude=1.0, frequency=1.0):
        t = np.arange(grid_steps(T, dt)) * dt
        return cls(dt, amplitude * np.sin(frequency * t))

    @classmethod
    def parse(cls, spec: str, T, dt):
        """``zero``, ``const:C`` or ``sin``."""
        spec = spec.strip()
        if spec == "zero":
            return cls.zero(T, dt)
        if spec == "sin":
            return cls.sinusoid(T, dt)
        if spec.startswith("const:"):
            return cls.constant(float(spec.split(":", 1)[1]), T, dt)
        raise ValueError(f"unknown control {spec!r}; use zero, const:C or sin")

    def refined(self, factor: int) -> "ControlSignal":
        """Same piecewise-constant signal on a grid ``factor`` times finer."""
        return ControlSignal(self.dt / factor, np.repeat(self.values, factor))


@dataclass(frozen=True, eq=False)
class DualTrajectory:
    dt: float
    Y: np.ndarray
    f: np.ndarray
    V_is_zero: bool = True

    @property
    def Y0(self):
        return self.Y[0]

    @property
    def n_steps(self) -> int:
        return self.Y.shape[0] - 1


def _step_matrices(A, dt):
    # exp([[A, I], [0, 0]] dt) = [[exp(A dt), int_0^dt exp(A s) ds], [0, I]]
    d = A.shape[0]
    aug = np.zeros((2 * d, 2 * d))
    aug[:d, :d] = A * dt
    aug[:d, d:] = np.eye(d) * dt
    E = expm(aug)
    return E[:d, :d], E[:d, d:]


def solve_backward_ode(model: HmmModel, f, U: ControlSignal, T: float) -> DualTrajectory:
    """Exact backward solution for a piecewise-constant control.

    ``Y_k = exp(A dt) Y_{k+1} + (int_0^dt exp(A s) ds) h U_k`` with
    ``Y_n = f``.
    """
    f = as_vector(f, name="f", length=model.d)
    n = grid_steps(T, U.dt)
    if n != U.n_steps:
        raise GridMismatch(f"control has {U.n_steps} steps, horizon needs {n}")
    E, G = _step_matrices(model.A, U.dt)
    Gh = G @ model.h
    Y = np.empty((n + 1, model.d))
    Y[n] = f
    for k in range(n - 1, -1, -1):
        Y[k] = E @ Y[k + 1] + Gh * U.values[k]
    return DualTrajectory(dt=U.dt, Y=Y, f=f.copy())


def _check_grids(dual: DualTrajectory, U: ControlSignal, n_steps: int, dt: float):
    if dual.n_steps != U.n_steps or U.n_steps != n_steps:
        raise GridMismatch(
            f"step counts differ: dual {dual.n_steps}, control {U.n_steps}, grid {n_steps}"
        )
    if abs(dual.dt - dt) > 1e-12 * dt or abs(U.dt - dt) > 1e-12 * dt:
        raise GridMismatch(f"step sizes differ: dual {dual.dt}, control {U.dt}, grid {dt}")


def estimator_value(pi0, dual: DualTrajectory, U: ControlSignal, obs: ObservationGrid) -> float:
    """``S_T = pi0(Y_0) - sum_k U_k dZ_k`` (left-point sum)."""
    _check_grids(dual, U, obs.n_steps, obs.dt)
    pi0 = probability_vector(pi0, length=dual.Y.shape[1], name="pi0")
    return float(pi0 @ dual.Y0 - U.values @ obs.increments)


def pathwise_cost(path: SamplePath, dual: DualTrajectory, U: ControlSignal, model: HmmModel,
                  mu) -> float:
    """Realized cost ``|Y0(X0) - mu(Y0)|^2 + sum_k [Gamma(Y_k)(X_k) + R U_k^2] dt``.

    ``X`` is read at the left end of each step.
    """
    n = grid_steps(path.horizon, dual.dt)
    _check_grids(dual, U, n, dual.dt)
    mu = probability_vector(mu, length=model.d, name="mu")
    states = path.state_at(np.arange(n) * dual.dt)
    gamma = carre_du_champ(model, dual.Y[:-1])
    running = gamma[np.arange(n), states].sum() + model.R * np.sum(U.values**2)
    terminal = (dual.Y0[path.initial_state] - mu @ dual.Y0) ** 2
    return float(terminal + running * dual.dt)


def osc(f) -> float:
    f = as_vector(f, name="f")
    return float(f.max() - f.min())


# -- Monte Carlo checks ------------------------------------------------------------


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    se = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(x.mean()), se


@dataclass(frozen=True)
class CostBreakdown:
    terminal: float
    running_gamma: float
    running_control: float
    total: float
    std_error: float


@dataclass(frozen=True)
class DualityReport:
    lhs: float
    se_lhs: float
    rhs: float
    se_rhs: float
    prior_mismatch: float
    dt_allowance: float
    tolerance: float
    passed: bool
    cost: CostBreakdown
    n_trials: int
    dt: float
    T: float

    def to_dict(self):
        return asdict(self)


def _running_costs(model, Y, U_values, states, dt):
    n = U_values.shape[0]
    gamma = carre_du_champ(model, Y[:-1])
    running_gamma = gamma[np.arange(n)[None, :], states[:, :n]].sum(axis=1) * dt
    running_control = model.R * float(np.sum(U_values**2)) * dt
    return running_gamma, running_control


def duality_from_batches(model, mu, pi0, U: ControlSignal, f, T, batches, halving=True):
    """Duality check on already simulated trials (all drawn under ``mu``).

    ``halving`` re-evaluates the Riemann sum of the running cost on a grid
    twice as fine (same signal paths, same piecewise-constant control) to
    size the O(dt) quadrature bias.
    """
    mu = probability_vector(mu, length=model.d, name="mu")
    pi0 = probability_vector(pi0, length=model.d, name="pi0")
    f = as_vector(f, name="f", length=model.d)
    dual = solve_backward_ode(model, f, U, T)
    Y0 = dual.Y0
    mismatch = float((pi0 @ Y0 - mu @ Y0) ** 2)

    lhs, terminal, gam, fine_gam = [], [], [], []
    if halving:
        U_fine = U.refined(2)
        dual_fine = solve_backward_ode(model, f, U_fine, T)
        fine_grid = np.arange(U_fine.n_steps + 1) * U_fine.dt
    for batch in batches:
        _check_grids(dual, U, batch.dZ.shape[1], batch.dt)
        S = pi0 @ Y0 - batch.dZ @ U.values
        lhs.append((f[batch.xT] - S) ** 2)
        terminal.append((Y0[batch.x0] - mu @ Y0) ** 2)
        g, control = _running_costs(model, dual.Y, U.values, batch.states, U.dt)
        gam.append(g)
        if halving:
            fine_states = np.stack([p.state_at(fine_grid) for p in batch.paths])
            fine_gam.append(_running_costs(model, dual_fine.Y, U_fine.values, fine_states, U_fine.dt)[0])
    lhs = np.concatenate(lhs)
    terminal = np.concatenate(terminal)
    gam = np.concatenate(gam)
    cost = terminal + gam + control

    lhs_mean, se_lhs = _mean_se(lhs)
    cost_mean, se_cost = _mean_se(cost)
    rhs = cost_mean + mismatch
    allowance = 0.0
    if halving:
        fine_gam = np.concatenate(fine_gam)
        allowance = 2.0 * abs(float(gam.mean() - fine_gam.mean()))
    tolerance = 3.0 * (se_lhs + se_cost) + allowance
    breakdown = CostBreakdown(
        terminal=float(terminal.mean()),
        running_gamma=float(gam.mean()),
        running_control=float(control),
        total=cost_mean,
        std_error=se_cost,
    )
    return DualityReport(
        lhs=lhs_mean, se_lhs=se_lhs, rhs=rhs, se_rhs=se_cost, prior_mismatch=mismatch,
        dt_allowance=allowance, tolerance=tolerance, passed=bool(abs(lhs_mean - rhs) <= tolerance),
        cost=breakdown, n_trials=int(lhs.shape[0]), dt=float(U.dt), T=float(T),
    )


def _batches(model, prior, T, dt, n_trials, seed, chunk_size=None, substeps=1):
    n = grid_steps(T, dt)
    for ids in trial_chunks(n_trials, n, chunk_size):
        yield simulate_batch(model, prior, T, dt, ids, seed, substeps)


def duality_check(model: HmmModel, mu, pi0, U: ControlSignal, f, T: float, dt: float,
                  n_trials: int, seed: int, halving: bool = True, chunk_size=None) -> DualityReport:
    """Compare ``E|f(X_T) - S_T|^2`` with the control cost plus prior mismatch.

    Trials are drawn under ``mu``; the estimator uses ``pi0``. Passes when
    ``|LHS - RHS| <= 3 (se_LHS + se_RHS) + c_dt dt``.
    """
    if abs(U.dt - dt) > 1e-12 * dt:
        raise GridMismatch(f"control step {U.dt} differs from dt={dt}")
    batches = _batches(model, mu, T, dt, n_trials, seed, chunk_size)
    return duality_from_batches(model, mu, pi0, U, f, T, batches, halving=halving)


@dataclass(frozen=True)
class ValueIdentityReport:
    variance_estimate: float
    se_variance: float
    error_estimate: float
    se_error: float
    dt_allowance: float
    bound: float
    passed: bool
    within_bound: bool
    n_trials: int

    def to_dict(self):
        return asdict(self)


def _terminal_posteriors(model, prior, batch, substeps=1):
    """Filter posteriors at T on ``batch``; ``substeps`` coarsens the grid by summing increments."""
    dZ = batch.dZ
    dt = batch.dt
    if substeps > 1:
        dZ = dZ.reshape(dZ.shape[0], -1, substeps).sum(axis=2)
        dt = dt * substeps
    return filter_batch(model, prior, dZ, dt, record=[dZ.shape[1]])[0]


def value_identity_check(model: HmmModel, nu, f, T: float, dt: float, n_trials: int, seed: int,
                         dt_allowance: float | None = None, chunk_size=None) -> ValueIdentityReport:
    """Two estimates of the optimal value under ``nu``.

    (a) mean posterior variance of ``f`` at ``T``; (b) mean squared error of
    the filter estimate of ``f(X_T)``. They agree within three combined
    standard errors plus an O(dt) allowance; when ``dt_allowance`` is not
    given it is the shift of (a) - (b) after coarsening the same trials to
    ``2 dt``.
    """
    nu = probability_vector(nu, length=model.d, name="nu")
    f = as_vector(f, name="f", length=model.d)
    n = grid_steps(T, dt)
    pilot = dt_allowance is None and n % 2 == 0 and n > 0
    var, err, coarse_gap = [], [], []
    for batch in _batches(model, nu, T, dt, n_trials, seed, chunk_size):
        post = _terminal_posteriors(model, nu, batch)
        var.append(quadratic_form(post, f))
        err.append((f[batch.xT] - post @ f) ** 2)
        if pilot:
            coarse = _terminal_posteriors(model, nu, batch, substeps=2)
            coarse_gap.append(quadratic_form(coarse, f) - (f[batch.xT] - coarse @ f) ** 2)
    var = np.concatenate(var)
    err = np.concatenate(err)
    a, se_a = _mean_se(var)
    b, se_b = _mean_se(err)
    if dt_allowance is None:
        dt_allowance = abs(float(np.concatenate(coarse_gap).mean()) - (a - b)) if pilot else 0.0
    bound = 0.25 * osc(f) ** 2
    passed = abs(a - b) <= 3.0 * np.hypot(se_a, se_b) + dt_allowance
    within = a <= bound + 3.0 * se_a and b <= bound + 3.0 * se_b
    return ValueIdentityReport(
        variance_estimate=a, se_variance=se_a, error_estimate=b, se_error=se_b,
        dt_allowance=float(dt_allowance), bound=bound, passed=bool(passed),
        within_bound=bool(within), n_trials=int(var.shape[0]),
    )


@dataclass(frozen=True)
class FeedbackReport:
    candidate_cost: float
    se_candidate: float
    optimal_value: float
    se_optimal: float
    passed: bool
    max_abs_control: float

    def to_dict(self):
        return asdict(self)


def feedback_residual_check(model: HmmModel, nu, f, T: float, dt: float, n_trials: int,
                            seed: int = 0, chunk_size=None) -> FeedbackReport:
    """Diagnostic for the feedback control ``U_k = -h^T Sigma_k Y_k``.

    ``Y`` is the zero-control backward solution and ``Sigma_k`` the filter
    covariance under ``nu``. The candidate's cost is the mean squared error
    of the estimator ``nu(Y_0) - sum_k U_k dZ_k``; since that estimator is
    observation-measurable its error can never fall below the optimal value
    (mean posterior variance at ``T``), which is what is checked.
    """
    nu = probability_vector(nu, length=model.d, name="nu")
    f = as_vector(f, name="f", length=model.d)
    n = grid_steps(T, dt)
    Y = solve_backward_ode(model, f, ControlSignal.zero(T, dt), T).Y
    cand, opt = [], []
    max_u = 0.0
    for batch in _batches(model, nu, T, dt, n_trials, seed, chunk_size):
        posts = filter_batch(model, nu, batch.dZ, dt)  # (n+1, B, d)
        p = posts[:n]
        # h^T Sigma y = pi(h y) - pi(h) pi(y)
        U = -(np.einsum("kbx,kx->kb", p, model.h * Y[:n])
              - (p @ model.h) * np.einsum("kbx,kx->kb", p, Y[:n]))
        S = nu @ Y[0] - np.einsum("kb,bk->b", U, batch.dZ)
        cand.append((f[batch.xT] - S) ** 2)
        opt.append(quadratic_form(posts[n], f))
        max_u = max(max_u, float(np.abs(U).max()) if U.size else 0.0)
    c, se_c = _mean_se(np.concatenate(cand))
    o, se_o = _mean_se(np.concatenate(opt))
    return FeedbackReport(
        candidate_cost=c, se_candidate=se_c, optimal_value=o, se_optimal=se_o,
        passed=bool(c >= o - 3.0 * np.hypot(se_c, se_o)), max_abs_control=max_u,
    )


@dataclass(frozen=True)
class AdmissibilityReport:
    estimate: float
    std_error: float
    bound: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def admissibility_bound_check(model: HmmModel, mu, nu, f, T: float, dt: float, n_trials: int,
                              seed: int, chunk_size=None) -> AdmissibilityReport:
    """``E^mu |f(X_T) - pi_T^nu(f)|^2 <= max(mu/nu) osc(f)^2 / 4``.

    By duality the left side equals the cost of the ``nu``-optimal control
    under ``mu`` plus the prior-mismatch term.
    """
    mu = probability_vector(mu, length=model.d, name="mu")
    nu = probability_vector(nu, length=model.d, name="nu")
    if np.any((mu > 0) & (nu == 0)):
        raise AbsoluteContinuityViolation("mu is not absolutely continuous w.r.t. nu")
    f = as_vector(f, name="f", length=model.d)
    errs = []
    for batch in _batches(model, mu, T, dt, n_trials, seed, chunk_size):
        post = _terminal_posteriors(model, nu, batch)
        errs.append((f[batch.xT] - post @ f) ** 2)
    est, se = _mean_se(np.concatenate(errs))
    ratio = np.max(np.divide(mu, nu, out=np.zeros_like(mu), where=nu > 0))
    bound = float(ratio * 0.25 * osc(f) ** 2)
    return AdmissibilityReport(estimate=est, std_error=se, bound=bound, passed=bool(est <= bound + 3 * se))
