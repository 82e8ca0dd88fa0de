"""Problem instances: rate matrix, observation model, ergodic classes.

A model is the triple ``(A, h, R)``: the generator of a finite-state
Markov chain, the observation function and the (scalar) observation noise
covariance.  States are indexed ``0..d-1`` in code.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from ._validation import NUMERICS, as_vector, probability_vector
from .exceptions import (
    DimensionMismatch,
    NonFiniteValue,
    NumericalRankFailure,
    TransientStatesPresent,
    WeightCountMismatch,
    raise_violations,
)


def _frozen(arr):
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Validated filtering model. Build with :func:`validate_model`."""

    A: np.ndarray
    h: np.ndarray
    R: float
    name: str | None = None

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def with_noise(self, R: float) -> "HmmModel":
        return validate_model(self.A, self.h, R, name=self.name)

    def to_dict(self) -> dict:
        out = {"d": self.d, "A": self.A.tolist(), "h": self.h.tolist(), "R": self.R}
        if self.name is not None:
            out["name"] = self.name
        return out

    def __repr__(self):
        return f"HmmModel(name={self.name!r}, d={self.d}, R={self.R})"


def validate_model(A, h, R, name=None) -> HmmModel:
    """Check every model invariant and return an immutable :class:`HmmModel`.

    All violations are collected before raising; the raised exception is
    the class of the first one and lists the rest in ``violations``.
    Accepted rows are re-balanced so that ``A @ 1 == 0`` to machine
    precision.
    """
    violations = []
    A = np.asarray(A, dtype=float)
    h = np.asarray(h, dtype=float)
    try:
        R = float(R)
    except (TypeError, ValueError):
        raise_violations([("NonPositiveR", f"R must be a scalar, got {R!r}")])

    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise_violations([("DimensionMismatch", f"A must be square, got shape {A.shape}")])
    d = A.shape[0]
    if d == 0:
        raise_violations([("DimensionMismatch", "model needs at least one state")])
    if h.ndim != 1 or h.shape[0] != d:
        violations.append(("DimensionMismatch", f"h has shape {h.shape}, expected ({d},)"))
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(h)) or not math.isfinite(R):
        violations.append(("NonFinite", "A, h and R must be finite"))
    else:
        off = A - np.diag(np.diag(A))
        neg = np.argwhere(off < 0)
        if neg.size:
            where = ", ".join(f"A[{i},{j}]={A[i, j]:g}" for i, j in neg)
            violations.append(("NegativeOffDiagonal", where))
        rows = A.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows) > NUMERICS.row_sum_reject)
        if bad.size:
            where = ", ".join(f"row {i} sums to {rows[i]:g}" for i in bad)
            violations.append(("RowSumNonZero", where))
        if not R > 0:
            violations.append(("NonPositiveR", f"R={R:g} must be positive"))
    if violations:
        raise_violations(violations)

    A = A.copy()
    off = A - np.diag(np.diag(A))
    A[np.diag_indices(d)] = -off.sum(axis=1)
    return HmmModel(A=_frozen(A), h=_frozen(h), R=R, name=name)


# -- model files ------------------------------------------------------------

def _reject_constant(token):
    raise NonFiniteValue(f"non-finite literal {token} in model file")


def model_from_dict(doc: dict) -> HmmModel:
    missing = [k for k in ("d", "A", "h", "R") if k not in doc]
    if missing:
        raise ValueError(f"model document is missing fields {missing}")
    d = doc["d"]
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        raise ValueError(f"field d must be a positive integer, got {d!r}")
    A = np.asarray(doc["A"], dtype=float)
    if A.shape != (d, d):
        raise DimensionMismatch(f"A has shape {A.shape}, declared d={d}")
    return validate_model(A, doc["h"], doc["R"], name=doc.get("name"))


def loads_model(text: str) -> HmmModel:
    return model_from_dict(json.loads(text, parse_constant=_reject_constant))


def load_model(path) -> HmmModel:
    return loads_model(Path(path).read_text())


def dump_model(model: HmmModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


# -- ergodic structure ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ErgodicDecomposition:
    classes: tuple[tuple[int, ...], ...]
    indicator_vectors: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.classes)

    def class_of(self, state: int) -> int:
        for k, members in enumerate(self.classes):
            if state in members:
                return k
        raise IndexError(state)

    def labels(self) -> np.ndarray:
        """Class index of every state."""
        out = np.empty(self.indicator_vectors.shape[1], dtype=np.int64)
        for k, members in enumerate(self.classes):
            out[list(members)] = k
        return out


def ergodic_decomposition(model: HmmModel) -> ErgodicDecomposition:
    """Split the state space into closed communicating classes.

    Edges are ``x -> j`` iff ``A[x, j] > 0`` (exact threshold). Raises
    :class:`TransientStatesPresent` when some class can be left.
    """
    d = model.d
    adj = (model.A > 0) & ~np.eye(d, dtype=bool)
    _, labels = connected_components(adj.astype(np.int8), directed=True, connection="strong")
    groups = {}
    for x in range(d):
        groups.setdefault(labels[x], []).append(x)
    classes = sorted((tuple(g) for g in groups.values()), key=lambda g: g[0])

    leaking = []
    for members in classes:
        outside = np.setdiff1d(np.arange(d), members)
        if outside.size and np.any(adj[np.ix_(members, outside)]):
            leaking.extend(members)
    if leaking:
        raise TransientStatesPresent(sorted(leaking))

    indicators = np.zeros((len(classes), d))
    for k, members in enumerate(classes):
        indicators[k, list(members)] = 1.0
    indicators.setflags(write=False)
    return ErgodicDecomposition(classes=tuple(classes), indicator_vectors=indicators)


def invariant_measure(model: HmmModel, class_index: int, decomposition=None) -> np.ndarray:
    """Invariant probability vector of one ergodic class, embedded in R^d."""
    dec = decomposition if decomposition is not None else ergodic_decomposition(model)
    if not 0 <= class_index < dec.m:
        raise IndexError(f"class index {class_index} out of range for m={dec.m}")
    members = list(dec.classes[class_index])
    block = model.A[np.ix_(members, members)]
    _, s, vt = np.linalg.svd(block.T)
    tol = NUMERICS.invariant_rank_rel * max(np.abs(model.A).sum(axis=1).max(), np.finfo(float).tiny)
    null = vt[s <= tol]
    if null.shape[0] != 1:
        raise NumericalRankFailure(
            f"class {class_index}: transposed block has null space of dimension {null.shape[0]}"
        )
    v = null[0] / null[0].sum()
    if np.any(v <= 0):
        raise NumericalRankFailure(f"class {class_index}: invariant vector not strictly positive")
    out = np.zeros(model.d)
    out[members] = v
    return probability_vector(out)


def mixture_invariant(model: HmmModel, weights, decomposition=None) -> np.ndarray:
    """Convex combination of the per-class invariant measures."""
    dec = decomposition if decomposition is not None else ergodic_decomposition(model)
    w = as_vector(weights, name="weights")
    if w.shape[0] != dec.m:
        raise WeightCountMismatch(f"got {w.shape[0]} weights for {dec.m} classes")
    w = probability_vector(w, name="weights")
    out = sum(wk * invariant_measure(model, k, dec) for k, wk in enumerate(w))
    return probability_vector(out)
