"""Split-step integration of the Wonham filter.

Each step propagates the posterior with the exact transition matrix
``exp(A dt)`` and then applies the Bayes correction for a Gaussian
increment, ``w(x) = exp(h(x) dZ / R - h(x)^2 dt / (2R))``.  The
unnormalized update is linear in the prior, so positivity, class
confinement and the class-splitting identity hold to rounding error.

An Euler-Maruyama discretization of the filter SDE is available as
``scheme="euler"`` for convergence comparisons only.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import shortest_path

from ._validation import NUMERICS, as_vector, probability_vector
from .exceptions import DegenerateLikelihood, GridMismatch
from .model import HmmModel
from .paths import ObservationGrid

SCHEMES = ("split", "euler")


def _reachable(A):
    adj = (A > 0).astype(np.int8)
    dist = shortest_path(adj, directed=True, unweighted=True)
    return np.isfinite(dist)


def transition_matrix(model: HmmModel, dt: float) -> np.ndarray:
    """``exp(A dt)`` with rounding noise removed.

    Entries between states that cannot reach each other are set to exactly
    zero, tiny negative entries are clamped, rows are renormalized.
    """
    if not dt > 0:
        raise GridMismatch(f"dt must be positive, got {dt}")
    return _transition_matrix(model.A.tobytes(), model.d, float(dt)).copy()


@lru_cache(maxsize=64)
def _transition_matrix(A_bytes, d, dt):
    A = np.frombuffer(A_bytes, dtype=float).reshape(d, d)
    P = expm(A * dt)
    if P.min() < -1e3 * NUMERICS.transition_clamp:
        raise FloatingPointError(f"matrix exponential has entry {P.min():g} < 0")
    P[~_reachable(A)] = 0.0
    np.clip(P, 0.0, None, out=P)
    P /= P.sum(axis=1, keepdims=True)
    P.setflags(write=False)
    return P


def log_weights(model: HmmModel, dz, dt):
    return model.h * (dz / model.R) - 0.5 * model.h**2 * (dt / model.R)


def bayes_step(pi, dz: float, model: HmmModel, dt: float, P=None) -> np.ndarray:
    """One prediction-correction step of the split-step scheme.

    The log-weights are shifted by their maximum over the predicted
    support before exponentiation, so the normalizer is at least the
    largest predicted mass times one.
    """
    P = transition_matrix(model, dt) if P is None else P
    pred = P.T @ np.asarray(pi, dtype=float)
    lw = log_weights(model, dz, dt)
    support = pred > 0
    if not np.any(support):
        raise DegenerateLikelihood("predicted distribution has empty support")
    lw = lw - lw[support].max()
    post = np.where(support, pred * np.exp(np.where(support, lw, 0.0)), 0.0)
    total = post.sum()
    if not (np.isfinite(total) and total > 0):
        raise DegenerateLikelihood(f"normalizer is {total!r} (dZ={dz!r})")
    return post / total


@numba.njit(cache=True, nogil=True)
def _split_kernel(pi0, dZ, P, h, R, dt, record, out):
    # pi0: (n_paths, q, d), out: (q, n_rec, n_paths, d). The q filters of a
    # path share the Bayes weights, which do not depend on the prior.
    n_paths, n_steps = dZ.shape
    q_n = pi0.shape[1]
    d = P.shape[0]
    pi = np.empty((q_n, d))
    pred = np.empty((q_n, d))
    w = np.empty(d)
    lw = np.empty(d)
    n_rec = record.shape[0]
    for b in range(n_paths):
        for q in range(q_n):
            for j in range(d):
                pi[q, j] = pi0[b, q, j]
        r = 0
        while r < n_rec and record[r] == 0:
            for q in range(q_n):
                for j in range(d):
                    out[q, r, b, j] = pi[q, j]
            r += 1
        for k in range(n_steps):
            z = dZ[b, k]
            top = -np.inf
            for j in range(d):
                lw[j] = h[j] * (z / R) - 0.5 * h[j] * h[j] * (dt / R)
                charged = False
                for q in range(q_n):
                    acc = 0.0
                    for i in range(d):
                        acc += P[i, j] * pi[q, i]
                    pred[q, j] = acc
                    if acc > 0.0:
                        charged = True
                if charged and lw[j] > top:
                    top = lw[j]
            for j in range(d):
                w[j] = np.exp(lw[j] - top)
            for q in range(q_n):
                total = 0.0
                for j in range(d):
                    # states outside every predicted support may carry an
                    # overflowing weight; their mass stays exactly zero
                    v = pred[q, j] * w[j] if pred[q, j] > 0.0 else 0.0
                    pi[q, j] = v
                    total += v
                if not (total > 0.0 and total < np.inf):
                    # weights of this filter's own support underflowed; shift
                    # by the maximum over that support instead
                    own = -np.inf
                    for j in range(d):
                        if pred[q, j] > 0.0 and lw[j] > own:
                            own = lw[j]
                    total = 0.0
                    for j in range(d):
                        v = pred[q, j] * np.exp(lw[j] - own) if pred[q, j] > 0.0 else 0.0
                        pi[q, j] = v
                        total += v
                    if not (total > 0.0 and total < np.inf):
                        return b * n_steps + k
                for j in range(d):
                    pi[q, j] /= total
            while r < n_rec and record[r] == k + 1:
                for q in range(q_n):
                    for j in range(d):
                        out[q, r, b, j] = pi[q, j]
                r += 1
    return -1


@numba.njit(cache=True, nogil=True)
def _euler_kernel(pi0, dZ, A, h, R, dt, record, out):
    n_paths, n_steps = dZ.shape
    d = A.shape[0]
    pi = np.empty(d)
    nxt = np.empty(d)
    n_rec = record.shape[0]
    for b in range(n_paths):
        for j in range(d):
            pi[j] = pi0[b, j]
        r = 0
        while r < n_rec and record[r] == 0:
            for j in range(d):
                out[r, b, j] = pi[j]
            r += 1
        for k in range(n_steps):
            ph = 0.0
            for j in range(d):
                ph += pi[j] * h[j]
            innov = dZ[b, k] - ph * dt
            total = 0.0
            for j in range(d):
                drift = 0.0
                for i in range(d):
                    drift += A[i, j] * pi[i]
                v = pi[j] + drift * dt + (h[j] - ph) * pi[j] * innov / R
                if v < 0.0:
                    v = 0.0
                nxt[j] = v
                total += v
            if not (total > 0.0 and total < np.inf):
                return b * n_steps + k
            for j in range(d):
                pi[j] = nxt[j] / total
            while r < n_rec and record[r] == k + 1:
                for j in range(d):
                    out[r, b, j] = pi[j]
                r += 1
    return -1


def _prepare(model, priors, dZ, record):
    dZ = np.ascontiguousarray(np.atleast_2d(dZ), dtype=float)
    n_paths, n_steps = dZ.shape
    priors = np.asarray(priors, dtype=float)
    if priors.ndim == 1:
        priors = np.broadcast_to(priors, (n_paths, model.d))
    if priors.shape != (n_paths, model.d):
        raise GridMismatch(f"priors have shape {priors.shape}, expected {(n_paths, model.d)}")
    record = np.arange(n_steps + 1) if record is None else np.asarray(record, dtype=np.int64)
    if record.size and (record.min() < 0 or record.max() > n_steps or np.any(np.diff(record) <= 0)):
        raise GridMismatch("record indices must be strictly increasing within [0, n_steps]")
    return priors, dZ, record


def _raise_status(status, n_steps):
    if status >= 0:
        path, step = divmod(int(status), n_steps)
        raise DegenerateLikelihood(f"normalizer degenerate on path {path} at step {step}")


def filter_batch(model: HmmModel, priors, dZ, dt: float, record=None, scheme: str = "split"):
    """Run the filter on many observation paths at once.

    Parameters
    ----------
    priors : array, shape (d,) or (n_paths, d)
    dZ : array, shape (n_paths, n_steps)
    record : step indices at which to store the posterior (default: all)

    Returns
    -------
    array of shape ``(len(record), n_paths, d)``
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if scheme == "split":
        return filter_batch_multi(model, [priors], dZ, dt, record)[0]
    priors, dZ, record = _prepare(model, priors, dZ, record)
    out = np.empty((record.shape[0], dZ.shape[0], model.d))
    status = _euler_kernel(np.ascontiguousarray(priors), dZ, model.A, model.h, model.R,
                           float(dt), record, out)
    _raise_status(status, dZ.shape[1])
    return out


def filter_batch_multi(model: HmmModel, prior_list, dZ, dt: float, record=None):
    """Split-step filters from several priors on the same observation paths.

    Returns an array of shape ``(len(prior_list), len(record), n_paths, d)``;
    entry ``q`` equals ``filter_batch(model, prior_list[q], ...)``.
    """
    prepared = [_prepare(model, p, dZ, record) for p in prior_list]
    _, dZ, record = prepared[0]
    stacked = np.ascontiguousarray(np.stack([p[0] for p in prepared], axis=1))
    out = np.empty((len(prior_list), record.shape[0], dZ.shape[0], model.d))
    P = transition_matrix(model, dt)
    status = _split_kernel(stacked, dZ, P, model.h, model.R, float(dt), record, out)
    _raise_status(status, dZ.shape[1])
    return out


@dataclass(frozen=True, eq=False)
class FilterTrajectory:
    dt: float
    posteriors: np.ndarray
    innovations: np.ndarray
    prior_label: str | None = None

    @property
    def n_steps(self) -> int:
        return self.innovations.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def expectation(self, f) -> np.ndarray:
        """``pi_k(f)`` for every step."""
        return self.posteriors @ np.asarray(f, dtype=float)


def run_wonham(model: HmmModel, prior, obs: ObservationGrid, scheme: str = "split",
               prior_label: str | None = None) -> FilterTrajectory:
    """Filter one observation path; innovations use the pre-update posterior."""
    prior = probability_vector(prior, length=model.d, name="prior")
    dZ = np.asarray(obs.increments, dtype=float)
    if dZ.shape[0] == 0:
        posts = prior[None, :].copy()
    else:
        posts = filter_batch(model, prior, dZ[None, :], obs.dt, scheme=scheme)[:, 0, :]
    innovations = dZ - (posts[:-1] @ model.h) * obs.dt
    return FilterTrajectory(dt=obs.dt, posteriors=posts, innovations=innovations,
                            prior_label=prior_label)


@dataclass(frozen=True, eq=False)
class CovarianceSequence:
    matrices: np.ndarray


def covariance(pi) -> np.ndarray:
    """``diag(pi) - pi pi^T`` (batched over leading axes)."""
    pi = np.asarray(pi, dtype=float)
    eye = np.eye(pi.shape[-1])
    return pi[..., :, None] * eye - pi[..., :, None] * pi[..., None, :]


def covariance_sequence(traj: FilterTrajectory) -> CovarianceSequence:
    return CovarianceSequence(matrices=covariance(traj.posteriors))


def quadratic_form(pi, f) -> np.ndarray:
    """``f^T (diag(pi) - pi pi^T) f``, i.e. the posterior variance of ``f``.

    Evaluated in centred form ``sum_x pi(x) (f(x) - pi(f))^2``; ``pi`` may
    carry leading batch axes.
    """
    pi = np.asarray(pi, dtype=float)
    f = as_vector(f, name="f", length=pi.shape[-1])
    mean = pi @ f
    centred = f - mean[..., None]
    return np.einsum("...x,...x->...", pi, centred * centred)
