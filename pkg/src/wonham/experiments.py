"""Monte Carlo experiments on filter stability and class detection.

Every experiment draws trials with per-trial random streams, processes
them in fixed blocks and concatenates per-trial statistics in trial order,
so results do not depend on block size or thread count.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from ._io import write_csv
from ._validation import as_vector, checkpoint_steps, grid_steps, probability_vector
from .analysis import stabilizability
from .exceptions import (
    AbsoluteContinuityViolation,
    ModelIsStabilizable,
    NotInvariantPrior,
    SingleClassModelWarning,
)
from .filter import filter_batch, filter_batch_multi
from .model import HmmModel, ergodic_decomposition, invariant_measure, load_model, model_from_dict
from .paths import simulate_batch, trial_chunks

DEFAULT_CHECKPOINTS = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


def default_checkpoints(T, dt):
    times = [t for t in DEFAULT_CHECKPOINTS if t < T and abs(round(t / dt) * dt - t) < 1e-12]
    return tuple(times) + (float(T),)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    model: HmmModel
    prior_mu: np.ndarray
    prior_nu: np.ndarray
    f_list: tuple
    T: float
    dt: float = 1e-3
    n_trials: int = 1000
    master_seed: int = 0
    checkpoints: tuple | None = None
    chunk_size: int | None = None
    threads: int = 1

    def __post_init__(self):
        d = self.model.d
        set_ = object.__setattr__
        set_(self, "prior_mu", probability_vector(self.prior_mu, length=d, name="mu"))
        set_(self, "prior_nu", probability_vector(self.prior_nu, length=d, name="nu"))
        fs = tuple(as_vector(f, name="f", length=d) for f in self.f_list)
        if not fs:
            raise ValueError("f_list must contain at least one test function")
        set_(self, "f_list", fs)
        if self.n_trials < 1:
            raise ValueError("n_trials must be positive")
        if self.checkpoints is None:
            set_(self, "checkpoints", default_checkpoints(self.T, self.dt))
        set_(self, "checkpoints", tuple(float(t) for t in self.checkpoints))
        checkpoint_steps(self.checkpoints, self.dt, self.T)

    @property
    def n_steps(self) -> int:
        return grid_steps(self.T, self.dt)

    @property
    def checkpoint_steps(self) -> np.ndarray:
        return checkpoint_steps(self.checkpoints, self.dt, self.T)

    def absolutely_continuous(self) -> bool:
        return not np.any((self.prior_mu > 0) & (self.prior_nu == 0))

    @classmethod
    def from_dict(cls, doc: dict, model: HmmModel | None = None, base_dir=None):
        """Build from an experiment document (see README for the fields)."""
        if model is None:
            spec = doc["model"]
            if isinstance(spec, dict):
                model = model_from_dict(spec)
            else:
                path = Path(spec)
                model = load_model(path if base_dir is None or path.is_absolute() else Path(base_dir) / path)
        f_list = doc.get("f", [])
        if f_list and not isinstance(f_list[0], (list, tuple)):
            f_list = [f_list]
        T = float(doc["T"])
        return cls(
            model=model,
            prior_mu=doc["mu"],
            prior_nu=doc.get("nu", doc["mu"]),
            f_list=tuple(f_list),
            T=T,
            dt=float(doc.get("dt", 1e-3)),
            n_trials=int(doc.get("trials", 1000)),
            master_seed=int(doc.get("seed", 0)),
            checkpoints=doc.get("checkpoints"),
        )


def _map_trials(config: ExperimentConfig, prior, work):
    """Simulate trials under ``prior`` block by block and apply ``work``.

    ``work(batch)`` returns a dict of arrays whose first axis indexes
    trials; blocks are concatenated in trial order.
    """
    blocks = trial_chunks(config.n_trials, config.n_steps, config.chunk_size)

    def one(ids):
        batch = simulate_batch(config.model, prior, config.T, config.dt, ids, config.master_seed)
        return work(batch)

    if config.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(one, blocks))
    else:
        parts = [one(ids) for ids in blocks]
    return {key: np.concatenate([p[key] for p in parts], axis=0) for key in parts[0]}


def _mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    se = x.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(x.mean(axis=axis))
    return x.mean(axis=axis), se


# -- filter stability ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StabilityCurve:
    """``E^mu |pi_t^mu(f) - pi_t^nu(f)|^2`` at the checkpoints."""

    times: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    f: np.ndarray

    @property
    def final(self) -> float:
        return float(self.values[-1])


def run_stability(config: ExperimentConfig) -> list[StabilityCurve]:
    """Filters from ``mu`` and ``nu`` on common observations drawn under ``mu``.

    Returns one curve per test function in ``config.f_list``.
    """
    if not config.absolutely_continuous():
        raise AbsoluteContinuityViolation("mu must be absolutely continuous w.r.t. nu")
    steps = config.checkpoint_steps
    F = np.stack(config.f_list, axis=1)

    def work(batch):
        post_mu, post_nu = filter_batch_multi(
            config.model, [config.prior_mu, config.prior_nu], batch.dZ, config.dt, record=steps
        )
        gap = (post_mu - post_nu) @ F  # (k, B, n_f)
        return {"sq": np.transpose(gap**2, (1, 0, 2))}

    sq = _map_trials(config, config.prior_mu, work)["sq"]
    mean, se = _mean_se(sq)
    times = np.asarray(config.checkpoints)
    return [StabilityCurve(times, mean[:, i], se[:, i], f) for i, f in enumerate(config.f_list)]


def worst_over_basis(curves: list[StabilityCurve]) -> StabilityCurve:
    """Pointwise worst curve, e.g. over the standard basis.

    Stability for every ``f`` follows from stability for a basis by
    linearity, so the worst basis curve summarizes the whole family.
    """
    values = np.stack([c.values for c in curves])
    pick = np.argmax(values, axis=0)
    cols = np.arange(values.shape[1])
    se = np.stack([c.std_errors for c in curves])[pick, cols]
    return StabilityCurve(curves[0].times, values[pick, cols], se, curves[int(pick[-1])].f)


# -- class detection --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DetectionResult:
    class_mse: np.ndarray
    class_mse_se: np.ndarray
    correct_fraction: float
    correct_fraction_se: float
    terminal_mass: np.ndarray = field(repr=False)
    true_class: np.ndarray = field(repr=False)
    note: str | None = None

    def histogram(self, k: int = 0, bins: int = 10):
        """Histogram of the terminal posterior mass of class ``k``."""
        return np.histogram(self.terminal_mass[:, k], bins=bins, range=(0.0, 1.0))


def run_detection(config: ExperimentConfig) -> DetectionResult:
    """Terminal posterior class masses versus the class of ``X_0``.

    Trials are drawn under ``mu``; the filter starts from ``nu``.
    """
    dec = ergodic_decomposition(config.model)
    if dec.m == 1:
        warnings.warn("single ergodic class: detection is vacuous", SingleClassModelWarning)
        return DetectionResult(
            class_mse=np.zeros(1), class_mse_se=np.zeros(1), correct_fraction=1.0,
            correct_fraction_se=0.0, terminal_mass=np.ones((config.n_trials, 1)),
            true_class=np.zeros(config.n_trials, dtype=np.int64),
            note="single ergodic class; every trial is trivially in the correct class",
        )
    if np.any(config.prior_nu <= 0):
        raise ValueError("detection requires a strictly positive nu")
    if not config.absolutely_continuous():
        raise AbsoluteContinuityViolation("mu must be absolutely continuous w.r.t. nu")
    labels = dec.labels()
    ind = dec.indicator_vectors

    def work(batch):
        post = filter_batch(config.model, config.prior_nu, batch.dZ, config.dt,
                            record=[config.n_steps])[0]
        return {"mass": post @ ind.T, "cls": labels[batch.x0]}

    out = _map_trials(config, config.prior_mu, work)
    mass, cls = out["mass"], out["cls"]
    onehot = np.eye(dec.m)[cls]
    mse, mse_se = _mean_se((mass - onehot) ** 2)
    correct = (np.argmax(mass, axis=1) == cls).astype(float)
    frac, frac_se = _mean_se(correct)
    return DetectionResult(
        class_mse=mse, class_mse_se=mse_se, correct_fraction=float(frac),
        correct_fraction_se=float(frac_se), terminal_mass=mass, true_class=cls,
    )


# -- splitting identity -----------------------------------------------------------


def class_priors(model: HmmModel, nu, decomposition=None) -> list[np.ndarray]:
    """Restriction of ``nu`` to each class, renormalized.

    Classes that ``nu`` does not charge get the class invariant measure.
    """
    dec = decomposition if decomposition is not None else ergodic_decomposition(model)
    out = []
    for k, members in enumerate(dec.classes):
        mass = nu[list(members)].sum()
        if mass > 0:
            p = np.zeros(model.d)
            p[list(members)] = nu[list(members)] / mass
            out.append(probability_vector(p))
        else:
            out.append(invariant_measure(model, k, dec))
    return out


def run_splitting_check(config: ExperimentConfig) -> float:
    """Largest pathwise gap between the filter from ``nu`` and its class mixture.

    Compares ``pi_t^nu(f)`` with ``sum_k pi_t^nu(1_k) pi_t^{nu_k}(f)`` at
    every grid time, every trial and every ``f`` in the config.
    """
    model = config.model
    dec = ergodic_decomposition(model)
    priors = class_priors(model, config.prior_nu, dec)
    F = np.stack(config.f_list, axis=1)
    ind = dec.indicator_vectors

    def work(batch):
        post, *post_k = filter_batch_multi(model, [config.prior_nu] + priors, batch.dZ, config.dt)
        mixture = np.zeros(post.shape[:2] + (F.shape[1],))
        for k, pk in enumerate(post_k):
            mixture += (post @ ind[k])[..., None] * (pk @ F)
        gap = np.abs(post @ F - mixture).max(axis=(0, 2))
        return {"gap": gap}

    return float(_map_trials(config, config.prior_nu, work)["gap"].max())


# -- martingale property of class masses -----------------------------------------------


@dataclass(frozen=True, eq=False)
class MartingaleReport:
    times: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    targets: np.ndarray
    passed: bool


def run_martingale_check(config: ExperimentConfig) -> MartingaleReport:
    """Class masses ``pi_t^nu(1_k)`` under ``P^nu`` keep their initial mean."""
    dec = ergodic_decomposition(config.model)
    ind = dec.indicator_vectors
    steps = config.checkpoint_steps

    def work(batch):
        post = filter_batch(config.model, config.prior_nu, batch.dZ, config.dt, record=steps)
        return {"mass": np.transpose(post @ ind.T, (1, 0, 2))}

    mass = _map_trials(config, config.prior_nu, work)["mass"]
    means, se = _mean_se(mass)
    targets = ind @ config.prior_nu
    slack = np.maximum(3.0 * se, 1e-12)
    passed = bool(np.all(np.abs(means - targets) <= slack))
    return MartingaleReport(np.asarray(config.checkpoints), means, se, targets, passed)


# -- monotone value under an invariant prior -------------------------------------------


@dataclass(frozen=True, eq=False)
class ValueCurve:
    """Estimates of ``E |f(X_T) - pi_T(f)|^2`` over horizons ``T``."""

    times: np.ndarray
    estimates: np.ndarray
    std_errors: np.ndarray
    f: np.ndarray
    monotone: bool


def run_monotonicity(config: ExperimentConfig, tol: float = 1e-10) -> list[ValueCurve]:
    """Value estimates under an invariant prior (``config.prior_mu``).

    ``monotone`` holds when every successive pair satisfies
    ``J[j+1] <= J[j] + 3 (se[j] + se[j+1])``.
    """
    mu_bar = config.prior_mu
    if np.abs(config.model.A.T @ mu_bar).max() > tol:
        raise NotInvariantPrior(f"A^T mu has sup-norm {np.abs(config.model.A.T @ mu_bar).max():g}")
    steps = config.checkpoint_steps
    F = np.stack(config.f_list, axis=1)

    def work(batch):
        post = filter_batch(config.model, mu_bar, batch.dZ, config.dt, record=steps)
        truth = F[batch.states[:, steps].T]  # (k, B, n_f)
        err = (truth - post @ F) ** 2
        return {"err": np.transpose(err, (1, 0, 2))}

    err = _map_trials(config, mu_bar, work)["err"]
    mean, se = _mean_se(err)
    curves = []
    for i, f in enumerate(config.f_list):
        m, s = mean[:, i], se[:, i]
        ok = bool(np.all(m[1:] <= m[:-1] + 3.0 * (s[1:] + s[:-1]) + 1e-15))
        curves.append(ValueCurve(np.asarray(config.checkpoints), m, s, f, ok))
    return curves


# -- necessity: non-stabilizable models are unstable -------------------------------------


@dataclass(frozen=True, eq=False)
class NecessityReport:
    witness: np.ndarray
    epsilon: float
    mu: np.ndarray
    nu: np.ndarray
    curve: StabilityCurve
    threshold: float
    passed: bool
    mismatch_times: np.ndarray
    prior_mismatch: np.ndarray
    expected_mismatch: float


def necessity_priors(witness, nu=None):
    """``nu`` (uniform by default) and ``mu = nu + eps * witness``."""
    d = witness.shape[0]
    nu = np.full(d, 1.0 / d) if nu is None else probability_vector(nu, length=d, name="nu")
    eps = min(0.5 * nu.min() / np.abs(witness).max(), 0.2)
    mu = nu + eps * witness
    return eps, probability_vector(np.clip(mu, 0.0, None)), nu


def run_necessity_demo(model: HmmModel, T: float, dt: float = 1e-3, n_trials: int = 1000,
                       seed: int = 0, checkpoints=None, nu=None, chunk_size=None,
                       threads: int = 1) -> NecessityReport:
    """Perturb a prior along the witness and show the filters never merge.

    Passes when the final value of the stability curve stays above
    ``0.5 eps^2 |f|^4``. Also reports ``|mu(Y_0) - nu(Y_0)|`` for the
    zero-control backward solution ``Y_0 = exp(A t) f`` at each checkpoint.
    """
    report = stabilizability(model)
    if report.verdict:
        raise ModelIsStabilizable(f"model {model.name!r} is stabilizable; no witness exists")
    f = report.witness
    eps, mu, nu = necessity_priors(f, nu)
    config = ExperimentConfig(model=model, prior_mu=mu, prior_nu=nu, f_list=(f,), T=T, dt=dt,
                              n_trials=n_trials, master_seed=seed, checkpoints=checkpoints,
                              chunk_size=chunk_size, threads=threads)
    curve = run_stability(config)[0]
    norm2 = float(f @ f)
    threshold = 0.5 * eps**2 * norm2**2
    times = np.asarray(config.checkpoints)
    mismatch = np.array([abs((mu - nu) @ (expm(model.A * t) @ f)) for t in times])
    return NecessityReport(
        witness=f, epsilon=float(eps), mu=mu, nu=nu, curve=curve, threshold=threshold,
        passed=bool(curve.final >= threshold), mismatch_times=times,
        prior_mismatch=mismatch, expected_mismatch=float(eps * norm2),
    )


# -- output files -------------------------------------------------------------------


def write_curve_csv(path, times, estimates, std_errors, comment: str | None = None) -> None:
    write_csv(path, ["t", "estimate", "std_error"], zip(times, estimates, std_errors), comment)
