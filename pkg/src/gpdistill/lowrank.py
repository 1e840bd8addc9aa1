"""Low-rank solves against (A Aᵀ + σ² I) without ever forming an M×M matrix.

A is a tall M×D matrix of kernel features (M inducing rows, D feature dims,
M ≫ D).  Everything here works in the D-dimensional feature space through the
Gram matrix G = AᵀA:

* :func:`aat_inv_b` applies (A Aᵀ + σ² I)⁻¹ to an M-vector through the
  eigendecomposition of G — cost O(MD + D³);
* :func:`posterior_weights` returns w = (G + σ² I)⁻¹ Aᵀ v, the D-space
  weights such that a query's posterior mean is uᵀw (the push-through
  identity Aᵀ(A Aᵀ + σ² I)⁻¹ = (G + σ² I)⁻¹ Aᵀ makes the two views agree).

The two routes share no linear-algebra code (Jacobi eigensolver vs LU solve),
so they cross-validate each other in the test suite.

:class:`GramCache` keeps G current across single-row replacements of A in
O(D²) per replacement.  Incremental updates accumulate round-off, so callers
owning the row matrix must rebuild the cache from scratch at least every
:data:`GRAM_REBUILD_INTERVAL` updates; the cache counts updates but cannot
rebuild itself (it deliberately does not retain A).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import ParameterError, ShapeError, StateError

__all__ = [
    "GRAM_REBUILD_INTERVAL",
    "GramCache",
    "aat_inv_b",
    "gram_init",
    "gram_update_row",
    "needs_rebuild",
    "posterior_weights",
]

#: forced full-recomputation cadence for incrementally maintained Gram caches
GRAM_REBUILD_INTERVAL = 10_000

#: eigenvalues below max(eigenvalue) * this are treated as exact rank deficiency
RANK_REL_TOL = 1e-12


@dataclass
class GramCache:
    """D×D Gram matrix of a tall row matrix, maintained incrementally.

    gram stays symmetric by construction (init symmetrizes; every update adds
    exactly symmetric rank-1 terms).  When ``row_digests`` is present (audit
    mode), it holds one CRC32 per row of the matrix the cache was built from,
    letting consumers detect drift between the cache and the matrix.
    """

    gram: np.ndarray
    updates_since_rebuild: int = 0
    row_digests: np.ndarray | None = None  # uint32 (M,) or None


def _row_digest(row: np.ndarray) -> np.uint32:
    return np.uint32(zlib.crc32(np.ascontiguousarray(row, dtype=np.float64).tobytes()))


def gram_init(a, with_audit: bool = False) -> GramCache:
    """Build the cache from scratch: G = AᵀA, exactly symmetrized."""
    a = numkit.as_matrix(a, "gram_init a")
    g = np.matmul(a.T, a)
    g = 0.5 * (g + g.T)
    digests = None
    if with_audit:
        digests = np.array([_row_digest(a[i]) for i in range(a.shape[0])],
                           dtype=np.uint32)
    return GramCache(gram=g, updates_since_rebuild=0, row_digests=digests)


def gram_update_row(cache: GramCache, old_row, new_row,
                    row_index: int | None = None) -> GramCache:
    """Replace one row's contribution: G ← G − old·oldᵀ + new·newᵀ, O(D²).

    ``row_index`` is required when the cache carries audit digests (the digest
    table must know which row changed); it is optional otherwise.
    """
    old_row = numkit.as_vector(old_row, "gram_update_row old_row")
    new_row = numkit.as_vector(new_row, "gram_update_row new_row")
    d = cache.gram.shape[0]
    if old_row.shape[0] != d or new_row.shape[0] != d:
        raise ShapeError("gram_update_row: row length does not match the cache")
    if cache.row_digests is not None:
        if row_index is None:
            raise ParameterError(
                "gram_update_row: row_index is required for an audited cache"
            )
        if not 0 <= row_index < cache.row_digests.shape[0]:
            raise ShapeError("gram_update_row: row_index out of range")
        if cache.row_digests[row_index] != _row_digest(old_row):
            raise StateError(
                "gram_update_row: audit digest mismatch — old_row is not the "
                f"row the cache saw last at index {row_index}"
            )
        cache.row_digests[row_index] = _row_digest(new_row)
    cache.gram -= np.outer(old_row, old_row)
    cache.gram += np.outer(new_row, new_row)
    cache.updates_since_rebuild += 1
    return cache


def needs_rebuild(cache: GramCache) -> bool:
    """True once the incremental-update budget is exhausted."""
    return cache.updates_since_rebuild >= GRAM_REBUILD_INTERVAL


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise ParameterError(f"sigma must be positive and finite, got {sigma}")
    return sigma


def _audit(cache: GramCache, a: np.ndarray) -> None:
    if cache.row_digests is None:
        return
    if cache.row_digests.shape[0] != a.shape[0]:
        raise StateError("audited cache row count does not match the matrix")
    for i in range(a.shape[0]):
        if cache.row_digests[i] != _row_digest(a[i]):
            raise StateError(
                f"audit digest mismatch at row {i}: the matrix has drifted "
                "from the state this cache was maintained against"
            )


def aat_inv_b(a, b, sigma: float, cache: GramCache | None = None) -> np.ndarray:
    """Solve (A Aᵀ + σ² I) x = b through the D×D eigendecomposition.

    With eigenpairs G ẽᵢ = λᵢ ẽᵢ of the Gram G = AᵀA, the unit vectors
    eᵢ = A ẽᵢ / √λᵢ (for λᵢ above the rank tolerance) are eigenvectors of
    A Aᵀ with the same eigenvalues, and

        (A Aᵀ + σ² I)⁻¹ b = E Λ Eᵀ b + (b − E Eᵀ b) / σ²,   Λ = diag(1/(λᵢ+σ²)).

    E is never materialized: Eᵀb and E·(…) are applied through A, keeping the
    cost at O(MD + D³) and never forming an M×M matrix.  Works for any M, D
    (rank-deficient directions fall into the 1/σ² complement term).
    """
    a = numkit.as_matrix(a, "aat_inv_b a")
    b = numkit.as_vector(b, "aat_inv_b b")
    m, d = a.shape
    if b.shape[0] != m:
        raise ShapeError(f"aat_inv_b: b has length {b.shape[0]}, expected {m}")
    sigma = _check_sigma(sigma)
    if cache is None:
        cache = gram_init(a)
    elif cache.gram.shape[0] != d:
        raise ShapeError("aat_inv_b: cache dimension does not match A")
    _audit(cache, a)

    eig = numkit.sym_eig(cache.gram)
    lam = eig.values
    top = max(float(lam[0]), 0.0)
    keep = lam > RANK_REL_TOL * top if top > 0.0 else np.zeros(d, dtype=bool)
    sig2 = sigma * sigma
    if not np.any(keep):
        return b / sig2
    lam_k = lam[keep]
    vec_k = eig.vectors[:, keep]  # (D, k) eigenvectors of G
    inv_sqrt = 1.0 / np.sqrt(lam_k)
    # t = Eᵀ b computed as diag(1/√λ) · ẽᵀ · (Aᵀ b): only O(MD) A-products
    at_b = np.matmul(a.T, b)
    t = inv_sqrt * np.matmul(vec_k.T, at_b)
    spectral = np.matmul(a, np.matmul(vec_k, inv_sqrt * (t / (lam_k + sig2))))
    projection = np.matmul(a, np.matmul(vec_k, inv_sqrt * t))
    return spectral + (b - projection) / sig2


def posterior_weights(cache: GramCache, a, v, sigma: float) -> np.ndarray:
    """D-space weights w = (G + σ² I)⁻¹ Aᵀ v via a direct LU solve.

    For any query features u, the posterior mean uᵀw equals
    (A u)ᵀ (A Aᵀ + σ² I)⁻¹ v computed in M-space (push-through identity).
    """
    a = numkit.as_matrix(a, "posterior_weights a")
    v = numkit.as_vector(v, "posterior_weights v")
    if v.shape[0] != a.shape[0]:
        raise ShapeError("posterior_weights: v length does not match A rows")
    if cache.gram.shape[0] != a.shape[1]:
        raise ShapeError("posterior_weights: cache dimension does not match A")
    sigma = _check_sigma(sigma)
    _audit(cache, a)
    d = a.shape[1]
    s = cache.gram + (sigma * sigma) * np.eye(d)
    return np.linalg.solve(s, np.matmul(a.T, v))
