"""Curated models and a random model generator for tests and experiments."""
from __future__ import annotations

import numpy as np
from scipy.linalg import block_diag
from scipy.sparse.csgraph import connected_components

from .model import HmmModel, validate_model

_BLOCK = np.array([[-1.0, 1.0], [2.0, -2.0]])


def sym2(R: float = 1.0) -> HmmModel:
    """Symmetric two-state chain, one class."""
    return validate_model([[-1.0, 1.0], [1.0, -1.0]], [0.0, 1.0], R, name="sym2")


def asym2(R: float = 1.0) -> HmmModel:
    """Two-state chain with invariant measure (2/3, 1/3)."""
    return validate_model(_BLOCK, [0.0, 1.0], R, name="asym2")


def detect2(R: float = 0.25) -> HmmModel:
    """Static two-state model: two singleton classes, distinguishable by ``h``."""
    return validate_model(np.zeros((2, 2)), [0.0, 1.0], R, name="detect2")


def consth(R: float = 1.0) -> HmmModel:
    """Static two-state model with constant ``h``: the filter never moves."""
    return validate_model(np.zeros((2, 2)), [1.0, 1.0], R, name="consth")


def twin(R: float = 1.0) -> HmmModel:
    """Two identical copies of ``asym2`` with identical observation functions."""
    return validate_model(block_diag(_BLOCK, _BLOCK), [0.0, 1.0, 0.0, 1.0], R, name="twin")


def cycle3(R: float = 1.0) -> HmmModel:
    """Irreducible three-state cycle with distinct levels of ``h``."""
    A = [[-2.0, 1.0, 1.0], [0.5, -1.5, 1.0], [1.0, 2.0, -3.0]]
    return validate_model(A, [0.0, 1.0, 2.0], R, name="cycle3")


CURATED = {fn.__name__: fn for fn in (sym2, asym2, detect2, consth, twin, cycle3)}


def curated_models() -> list[HmmModel]:
    return [fn() for fn in CURATED.values()]


def get_model(name: str, R: float | None = None) -> HmmModel:
    try:
        fn = CURATED[name]
    except KeyError:
        raise KeyError(f"unknown suite model {name!r}; choose from {sorted(CURATED)}") from None
    return fn() if R is None else fn(R)


def _irreducible_block(size, rng, density):
    while True:
        B = rng.integers(0, 4, size=(size, size)).astype(float)
        B *= rng.random((size, size)) < density
        np.fill_diagonal(B, 0.0)
        if size == 1 or _strongly_connected(B > 0):
            np.fill_diagonal(B, -B.sum(axis=1))
            return B


def _strongly_connected(adj):
    return connected_components(adj, directed=True, connection="strong")[0] == 1


def random_model(rng: np.random.Generator, d_max: int = 5, density: float = 0.6,
                 duplicate_prob: float = 0.3) -> HmmModel:
    """Random model with 1 to 3 closed irreducible classes and integer data.

    Rates lie in {0, ..., 3} and ``h`` in {0, 1, 2}. With probability
    ``duplicate_prob`` one class is an exact copy of another (same rates,
    same ``h``), which produces non-stabilizable models.
    """
    d = int(rng.integers(1, d_max + 1))
    m = int(rng.integers(1, min(3, d) + 1))
    sizes = np.ones(m, dtype=int)
    for _ in range(d - m):
        sizes[rng.integers(m)] += 1
    blocks = [_irreducible_block(int(s), rng, density) for s in sizes]
    hs = [rng.integers(0, 3, size=int(s)).astype(float) for s in sizes]
    if m >= 2 and rng.random() < duplicate_prob:
        i, j = rng.choice(m, size=2, replace=False)
        if sizes[i] == sizes[j]:
            blocks[j], hs[j] = blocks[i].copy(), hs[i].copy()
    perm = rng.permutation(d)
    A = block_diag(*blocks)[np.ix_(perm, perm)]
    h = np.concatenate(hs)[perm]
    return validate_model(A, h, 1.0, name="random")


def random_models(n: int, seed: int = 0, **kwargs) -> list[HmmModel]:
    rng = np.random.default_rng(seed)
    return [random_model(rng, **kwargs) for _ in range(n)]
