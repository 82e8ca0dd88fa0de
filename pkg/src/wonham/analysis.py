"""Controllable subspace of the dual system and stabilizability tests.

The controllable subspace is the smallest subspace of R^d that contains
the constant vector and is closed under ``y -> A y`` and ``y -> h * y``.
Stabilizability is decided three ways (null space of ``A`` inside the
subspace, class indicators inside the subspace, Hurwitz test on the
uncontrollable block) and the three answers must agree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import NUMERICS, as_vector
from .exceptions import DimensionMismatch, InternalEquivalenceViolation
from .model import HmmModel, ergodic_decomposition


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    """Orthonormal basis stored column-wise in ``basis`` (shape ``(d, dim)``)."""

    basis: np.ndarray
    tol: float

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    def project(self, f):
        return self.basis @ (self.basis.T @ f)

    def complement(self) -> "SubspaceBasis":
        """Orthonormal basis of the orthogonal complement."""
        d, n = self.basis.shape
        if n == 0:
            return SubspaceBasis(np.eye(d), self.tol)
        u, _, _ = np.linalg.svd(self.basis, full_matrices=True)
        return SubspaceBasis(_frozen(u[:, n:]), self.tol)


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def carre_du_champ(model: HmmModel, f) -> np.ndarray:
    """``Gamma(f)(x) = sum_j A[x, j] (f(x) - f(j))**2``.

    ``f`` may carry leading batch dimensions; the last axis has length d.
    """
    f = np.asarray(f, dtype=float)
    if f.shape[-1:] != (model.d,):
        raise DimensionMismatch(f"f has trailing dimension {f.shape[-1:]}, expected {model.d}")
    diff = f[..., :, None] - f[..., None, :]
    return np.einsum("xj,...xj->...x", model.A, diff * diff)


def _residual(v, Q):
    # two passes of classical Gram-Schmidt; one pass loses orthogonality for
    # nearly dependent candidates
    r = v.copy()
    for _ in range(2):
        if Q.shape[1]:
            r -= Q @ (Q.T @ r)
    return r


def controllable_subspace(model: HmmModel, tol: float | None = None) -> SubspaceBasis:
    """Closure of span{1} under multiplication by ``A`` and by ``diag(h)``.

    Each round applies both generators (``A`` first) to every current basis
    vector and keeps any residual above ``tol * max(1, |candidate|)``. The
    dimension grows every round until it stalls, so at most ``d`` rounds
    are needed.
    """
    tol = NUMERICS.subspace_rank if tol is None else tol
    d = model.d
    Q = np.ones((d, 1)) / np.sqrt(d)
    for _ in range(d):
        grown = False
        for col in range(Q.shape[1]):
            b = Q[:, col]
            for candidate in (model.A @ b, model.h * b):
                r = _residual(candidate, Q)
                norm = np.linalg.norm(r)
                if norm > tol * max(1.0, np.linalg.norm(candidate)):
                    Q = np.column_stack([Q, r / norm])
                    grown = True
            if Q.shape[1] == d:
                break
        if not grown or Q.shape[1] == d:
            break
    return SubspaceBasis(_frozen(Q), tol)


def null_space(model: HmmModel, tol: float | None = None) -> SubspaceBasis:
    """Orthonormal basis of ker(A) from the singular value decomposition."""
    tol = NUMERICS.subspace_rank if tol is None else tol
    _, s, vt = np.linalg.svd(model.A)
    cutoff = tol * s[0] if s[0] > 0 else 0.0
    return SubspaceBasis(_frozen(vt[s <= cutoff].T), tol)


def membership(subspace: SubspaceBasis, f, tol: float | None = None):
    """Return ``(in_subspace, residual)`` with a scale-relative residual."""
    tol = NUMERICS.membership if tol is None else tol
    f = as_vector(f, name="f", length=subspace.ambient_dim)
    residual = float(np.linalg.norm(f - subspace.project(f)) / max(1.0, np.linalg.norm(f)))
    return residual < tol, residual


@dataclass(frozen=True, eq=False)
class BlockDecomposition:
    T: np.ndarray
    A_bar: np.ndarray
    n: int

    @property
    def A_c(self):
        return self.A_bar[: self.n, : self.n]

    @property
    def A_uc(self):
        return self.A_bar[self.n :, self.n :]

    @property
    def coupling(self):
        return self.A_bar[: self.n, self.n :]

    @property
    def residual_lower_left(self) -> float:
        block = self.A_bar[self.n :, : self.n]
        return float(np.abs(block).sum(axis=1).max()) if block.size else 0.0


def block_decomposition(model: HmmModel, subspace: SubspaceBasis | None = None) -> BlockDecomposition:
    """Orthogonal change of basis putting ``A`` in block upper-triangular form."""
    C = subspace if subspace is not None else controllable_subspace(model)
    T = np.column_stack([C.basis, C.complement().basis])
    return BlockDecomposition(T=_frozen(T), A_bar=_frozen(T.T @ model.A @ T), n=C.dim)


@dataclass(frozen=True, eq=False)
class StabilizabilityReport:
    controllable_dim: int
    d: int
    n_classes: int
    nullspace_test: bool
    indicator_test: bool
    hurwitz_test: bool
    uc_eigenvalues: np.ndarray
    witness: np.ndarray | None
    subspace: SubspaceBasis = field(repr=False)
    blocks: BlockDecomposition = field(repr=False)

    @property
    def is_controllable(self) -> bool:
        return self.controllable_dim == self.d

    @property
    def verdict(self) -> bool:
        return self.nullspace_test

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "controllable_dim": self.controllable_dim,
            "n_classes": self.n_classes,
            "is_controllable": self.is_controllable,
            "nullspace_test": self.nullspace_test,
            "indicator_test": self.indicator_test,
            "hurwitz_test": self.hurwitz_test,
            "stabilizable": self.verdict,
            "uc_eigenvalues": [[float(z.real), float(z.imag)] for z in self.uc_eigenvalues],
            "witness": None if self.witness is None else self.witness.tolist(),
            "lower_left_residual": self.blocks.residual_lower_left,
        }


def _first_null_vector(M, tol):
    """Null vector of ``M`` with the earliest leading entry (row-echelon choice)."""
    _, s, vt = np.linalg.svd(M)
    s = np.concatenate([s, np.zeros(vt.shape[0] - s.shape[0])])
    N = vt[s <= tol]
    if N.shape[0] == 0:
        return None
    # reduced row echelon form of the rows of N; the first row has the
    # lexicographically earliest non-zero pattern
    R = N.copy()
    row = 0
    for col in range(R.shape[1]):
        if row == R.shape[0]:
            break
        pivot = row + int(np.argmax(np.abs(R[row:, col])))
        if abs(R[pivot, col]) <= 1e-10:
            continue
        R[[row, pivot]] = R[[pivot, row]]
        R[row] /= R[row, col]
        for other in range(R.shape[0]):
            if other != row:
                R[other] -= R[other, col] * R[row]
        row += 1
    v = R[0]
    return v / np.linalg.norm(v)


def _fix_sign(v, tol=1e-12):
    lead = np.flatnonzero(np.abs(v) > tol)
    return -v if lead.size and v[lead[0]] < 0 else v


def stabilizability(model: HmmModel, tol: float | None = None, check: bool = True) -> StabilizabilityReport:
    """Run the three equivalent stabilizability tests and build a witness.

    When the model is not stabilizable the witness is the unit vector
    ``T @ (0, eta)`` with ``eta`` a null vector of the uncontrollable block;
    it lies in the orthogonal complement of the controllable subspace.
    With ``check`` set, disagreement between the tests raises
    :class:`InternalEquivalenceViolation`.
    """
    tol = NUMERICS.subspace_rank if tol is None else tol
    dec = ergodic_decomposition(model)
    C = controllable_subspace(model, tol)
    S0 = null_space(model, tol)

    nullspace_test = all(membership(C, S0.basis[:, j])[0] for j in range(S0.dim))
    indicator_test = all(membership(C, ind)[0] for ind in dec.indicator_vectors)

    blocks = block_decomposition(model, C)
    scale = float(np.abs(model.A).sum(axis=1).max())
    eigs = np.linalg.eigvals(blocks.A_uc) if blocks.A_uc.size else np.zeros(0, dtype=complex)
    margin = NUMERICS.hurwitz_rel * scale
    hurwitz_test = bool(C.dim == model.d or np.all(eigs.real < -margin))

    if check and not (nullspace_test == indicator_test == hurwitz_test):
        raise InternalEquivalenceViolation(
            f"tests disagree: nullspace={nullspace_test}, indicator={indicator_test}, "
            f"hurwitz={hurwitz_test} (model {model.name!r})"
        )

    witness = None
    if not nullspace_test:
        eta = _first_null_vector(blocks.A_uc, tol * max(scale, 1.0))
        if eta is not None:
            f = blocks.T[:, C.dim :] @ eta
            witness = _frozen(_fix_sign(f / np.linalg.norm(f)))

    return StabilizabilityReport(
        controllable_dim=C.dim,
        d=model.d,
        n_classes=dec.m,
        nullspace_test=bool(nullspace_test),
        indicator_test=bool(indicator_test),
        hurwitz_test=hurwitz_test,
        uc_eigenvalues=np.sort_complex(eigs),
        witness=witness,
        subspace=C,
        blocks=blocks,
    )
