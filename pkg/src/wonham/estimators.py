"""scikit-learn style wrappers around the filter and the stabilizability analysis."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import probability_vector
from .analysis import stabilizability
from .filter import SCHEMES, filter_batch, run_wonham, transition_matrix
from .model import HmmModel, validate_model
from .paths import ObservationGrid


class WonhamFilter(TransformerMixin, BaseEstimator):
    """Wonham filter as a transformer from observation increments to posteriors.

    Parameters
    ----------
    A : array-like of shape (d, d)
        Rate matrix.
    h : array-like of shape (d,)
        Observation function.
    R : float
        Observation noise intensity.
    prior : array-like of shape (d,), default=None
        Initial distribution; uniform when None.
    dt : float
        Step of the observation grid.
    scheme : {"split", "euler"}

    Each row of ``X`` passed to :meth:`transform` is one path of increments
    ``dZ_k`` on the grid; the output row is the posterior at the final time.
    """

    def __init__(self, A=None, h=None, R=1.0, prior=None, dt=1e-3, scheme="split"):
        self.A = A
        self.h = h
        self.R = R
        self.prior = prior
        self.dt = dt
        self.scheme = scheme

    def fit(self, X=None, y=None):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not (np.isscalar(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be a positive number, got {self.dt!r}")
        self.model_ = validate_model(self.A, self.h, self.R)
        d = self.model_.d
        prior = np.full(d, 1.0 / d) if self.prior is None else self.prior
        self.prior_ = probability_vector(prior, length=d, name="prior")
        self.transition_matrix_ = transition_matrix(self.model_, self.dt)
        self.n_features_in_ = None if X is None else check_array(X).shape[1]
        return self

    @classmethod
    def from_model(cls, model: HmmModel, **kwargs):
        return cls(A=model.A, h=model.h, R=model.R, **kwargs)

    def _increments(self, X):
        check_is_fitted(self, "model_")
        return check_array(X, dtype=float, ensure_min_features=0)

    def predict_proba(self, X):
        """Posterior at the final grid time for every row of ``X``."""
        X = self._increments(X)
        if X.shape[1] == 0:
            return np.tile(self.prior_, (X.shape[0], 1))
        return filter_batch(self.model_, self.prior_, X, self.dt, record=[X.shape[1]],
                            scheme=self.scheme)[0]

    def transform(self, X):
        return self.predict_proba(X)

    def predict(self, X):
        """Maximum a posteriori state at the final time."""
        return np.argmax(self.predict_proba(X), axis=1)

    def filter_path(self, dz, prior_label=None):
        """Full posterior trajectory for a single increment path."""
        check_is_fitted(self, "model_")
        dz = np.asarray(dz, dtype=float).ravel()
        return run_wonham(self.model_, self.prior_, ObservationGrid(float(self.dt), dz),
                          scheme=self.scheme, prior_label=prior_label)


class StabilizabilityAnalyzer(BaseEstimator):
    """Fit on an :class:`HmmModel` to obtain its stabilizability report."""

    def __init__(self, tol=None):
        self.tol = tol

    def fit(self, model: HmmModel, y=None):
        if not isinstance(model, HmmModel):
            raise TypeError(f"expected an HmmModel, got {type(model).__name__}")
        self.report_ = stabilizability(model, tol=self.tol)
        self.subspace_ = self.report_.subspace
        return self

    @property
    def stabilizable_(self) -> bool:
        check_is_fitted(self, "report_")
        return self.report_.verdict
