"""Exact simulation of the hidden chain and of gridded observation increments.

Every trial owns a :class:`RngStream`; the signal path and the observation
noise come from disjoint Philox sub-streams so refining ``dt`` never
changes the simulated signal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import grid_steps, probability_vector
from .model import HmmModel

_MASK64 = (1 << 64) - 1
SIGNAL, NOISE = 0, 1


@dataclass(frozen=True)
class RngStream:
    """Random stream of one trial, keyed by ``(master_seed, stream_id)``."""

    master_seed: int
    stream_id: int

    def _generator(self, sub: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.master_seed) & _MASK64, spawn_key=(int(self.stream_id), sub)
        )
        return np.random.Generator(np.random.Philox(seq))

    def signal(self) -> np.random.Generator:
        return self._generator(SIGNAL)

    def noise(self) -> np.random.Generator:
        return self._generator(NOISE)


@dataclass(frozen=True, eq=False)
class SamplePath:
    initial_state: int
    jump_times: np.ndarray
    jump_targets: np.ndarray
    horizon: float

    @property
    def states(self) -> np.ndarray:
        """Visited states: initial state followed by every jump target."""
        return np.concatenate([[self.initial_state], self.jump_targets]).astype(np.int64)

    def state_at(self, t):
        """State at time(s) ``t`` (right-continuous)."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.states[idx]

    def integral(self, h) -> float:
        """``int_0^T h(X_s) ds`` evaluated directly from the jump times."""
        knots = np.concatenate([[0.0], self.jump_times, [self.horizon]])
        return float(np.dot(np.asarray(h)[self.states], np.diff(knots)))


@dataclass(frozen=True, eq=False)
class ObservationGrid:
    dt: float
    increments: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def sample_initial(prior, rng: np.random.Generator) -> int:
    """Categorical draw from ``prior`` by inversion of one uniform."""
    cdf = np.cumsum(prior)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def _jump_tables(A):
    rates = -np.diag(A).copy()
    cdfs = np.cumsum(A - np.diag(np.diag(A)), axis=1)
    return rates, cdfs


def _jump_chain(rates, cdfs, x0, T, rng):
    times, targets = [], []
    t, x = 0.0, int(x0)
    while rates[x] > 0:
        t += rng.exponential(1.0 / rates[x])
        if t > T:
            break
        u = rng.random() * cdfs[x, -1]
        x = int(np.searchsorted(cdfs[x], u, side="right"))
        times.append(t)
        targets.append(x)
    return SamplePath(
        initial_state=int(x0),
        jump_times=np.asarray(times, dtype=float),
        jump_targets=np.asarray(targets, dtype=np.int64),
        horizon=float(T),
    )


def sample_ctmc(model: HmmModel, x0: int, T: float, rng: np.random.Generator) -> SamplePath:
    """Jump-chain simulation with exponential holding times on ``[0, T]``.

    In state ``x`` the holding time is exponential with rate ``-A[x, x]``
    (absorbing when that rate is zero) and the next state is ``j`` with
    probability ``A[x, j] / -A[x, x]``.
    """
    rates, cdfs = _jump_tables(model.A)
    return _jump_chain(rates, cdfs, x0, T, rng)


def integrate_h(path: SamplePath, h, dt: float) -> np.ndarray:
    """Per-step integrals ``int_{t_k}^{t_{k+1}} h(X_s) ds``, exact.

    The running integral is piecewise linear with kinks at jump times, so
    linear interpolation at grid points is exact.
    """
    n = grid_steps(path.horizon, dt)
    knots = np.concatenate([[0.0], path.jump_times, [path.horizon]])
    running = np.concatenate([[0.0], np.cumsum(np.asarray(h)[path.states] * np.diff(knots))])
    return np.diff(np.interp(np.arange(n + 1) * dt, knots, running))


def brownian_increments(rng: np.random.Generator, n_steps: int, dt: float, R: float,
                        substeps: int = 1) -> np.ndarray:
    """Increments of a Wiener process with variance ``R`` per unit time.

    With ``substeps > 1`` each increment is the sum of ``substeps`` finer
    increments, so a run at ``dt`` with ``substeps=2`` sees the same
    Brownian path as a run at ``dt/2``.
    """
    xi = rng.standard_normal(n_steps * substeps)
    scale = np.sqrt(R * dt / substeps)
    if substeps == 1:
        return scale * xi
    return scale * xi.reshape(n_steps, substeps).sum(axis=1)


def sample_observations(path: SamplePath, model: HmmModel, dt: float, rng: np.random.Generator,
                        substeps: int = 1) -> ObservationGrid:
    """``dZ_k = int h(X) ds over step k + sqrt(R dt) * xi_k``."""
    signal = integrate_h(path, model.h, dt)
    noise = brownian_increments(rng, signal.shape[0], dt, model.R, substeps)
    return ObservationGrid(dt=float(dt), increments=signal + noise)


def simulate_trial(model: HmmModel, prior, T: float, dt: float, stream: RngStream,
                   substeps: int = 1):
    """One trial: initial state from ``prior``, signal path, observations."""
    sig = stream.signal()
    x0 = sample_initial(prior, sig)
    path = sample_ctmc(model, x0, T, sig)
    obs = sample_observations(path, model, dt, stream.noise(), substeps)
    return path, obs


@dataclass(frozen=True, eq=False)
class TrialBatch:
    """A block of simulated trials in array form.

    ``states[i, k]`` is the state of trial ``i`` at ``t_k`` (``k = 0..n``);
    ``dZ[i, k]`` is its observation increment over ``[t_k, t_{k+1}]``.
    """

    trial_ids: np.ndarray
    dt: float
    states: np.ndarray
    dZ: np.ndarray
    paths: list = field(repr=False)

    @property
    def x0(self):
        return self.states[:, 0]

    @property
    def xT(self):
        return self.states[:, -1]

    def __len__(self):
        return self.trial_ids.shape[0]


def simulate_batch(model: HmmModel, prior, T: float, dt: float, trial_ids, seed: int,
                   substeps: int = 1) -> TrialBatch:
    """Simulate the listed trials; draws match :func:`simulate_trial` exactly."""
    prior = probability_vector(prior, length=model.d, name="prior")
    n = grid_steps(T, dt)
    ids = np.asarray(trial_ids, dtype=np.int64)
    grid = np.arange(n + 1) * dt
    rates, cdfs = _jump_tables(model.A)
    h = model.h
    states = np.empty((ids.shape[0], n + 1), dtype=np.int64)
    dZ = np.empty((ids.shape[0], n))
    paths = []
    for i, sid in enumerate(ids):
        stream = RngStream(seed, int(sid))
        sig = stream.signal()
        path = _jump_chain(rates, cdfs, sample_initial(prior, sig), T, sig)
        visited = path.states
        states[i] = visited[np.searchsorted(path.jump_times, grid, side="right")]
        knots = np.concatenate([[0.0], path.jump_times, [T]])
        running = np.concatenate([[0.0], np.cumsum(h[visited] * np.diff(knots))])
        dZ[i] = np.diff(np.interp(grid, knots, running))
        dZ[i] += brownian_increments(stream.noise(), n, dt, model.R, substeps)
        paths.append(path)
    return TrialBatch(trial_ids=ids, dt=float(dt), states=states, dZ=dZ, paths=paths)


def trial_chunks(n_trials: int, n_steps: int, chunk_size: int | None = None, budget: int = 4_000_000):
    """Split ``range(n_trials)`` into index blocks whose arrays fit ``budget`` floats."""
    if chunk_size is None:
        chunk_size = max(1, budget // max(1, n_steps + 1))
    return [np.arange(lo, min(lo + chunk_size, n_trials)) for lo in range(0, n_trials, chunk_size)]
