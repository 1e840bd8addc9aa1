"""Dense linear-algebra kit: strict-shape numpy wrappers plus a from-scratch
symmetric eigensolver.

Everything operates on float64 numpy arrays.  The wrappers validate rank,
partner shapes, and finiteness up front and raise the typed errors from
:mod:`gpdistill.errors` instead of letting numpy broadcast its way into
silently wrong answers.

``sym_eig`` is a cyclic Jacobi iteration written against plain array ops, kept
deliberately independent of ``numpy.linalg`` so that the eigendecomposition
route and the LU solve route used elsewhere in the package cross-check each
other through genuinely different code paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, NumericalError, ShapeError

__all__ = [
    "EigenPair",
    "argsort_desc",
    "as_matrix",
    "as_vector",
    "axpy",
    "dot",
    "matmul",
    "matvec",
    "pearson",
    "sym_eig",
    "transpose",
]

#: cap on full Jacobi sweeps before declaring non-convergence
JACOBI_MAX_SWEEPS = 100

#: off-diagonal Frobenius threshold, relative to the input's Frobenius norm
JACOBI_REL_THRESHOLD = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return ``x`` as a finite float64 2-D array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name}: non-finite entries")
    return a


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Validate and return ``x`` as a finite float64 1-D array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name}: expected 1-D array, got ndim={v.ndim}")
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"{name}: non-finite entries")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-D arrays with explicit inner-dimension check."""
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def matvec(a, x) -> np.ndarray:
    """Matrix-vector product with explicit shape check."""
    a = as_matrix(a, "matvec lhs")
    x = as_vector(x, "matvec rhs")
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: inner dims differ, {a.shape} @ {x.shape}")
    return np.matmul(a, x)


def transpose(a) -> np.ndarray:
    """Transpose of a 2-D array."""
    return as_matrix(a, "transpose arg").T


def dot(x, y) -> float:
    """Inner product of two equal-length vectors."""
    x = as_vector(x, "dot lhs")
    y = as_vector(y, "dot rhs")
    if x.shape != y.shape:
        raise ShapeError(f"dot: length mismatch, {x.shape} vs {y.shape}")
    return float(np.dot(x, y))


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` for equal-length vectors."""
    x = as_vector(x, "axpy x")
    y = as_vector(y, "axpy y")
    if x.shape != y.shape:
        raise ShapeError(f"axpy: length mismatch, {x.shape} vs {y.shape}")
    return float(alpha) * x + y


def argsort_desc(x) -> np.ndarray:
    """Indices sorting ``x`` in descending order; ties keep original order."""
    v = as_vector(x, "argsort_desc arg")
    return np.argsort(-v, kind="stable")


def pearson(x, y) -> float:
    """Pearson correlation of two equal-length vectors (length >= 2).

    Raises DegenerateInputError when either vector has (numerically) zero
    variance, where the coefficient is undefined.
    """
    x = as_vector(x, "pearson x")
    y = as_vector(y, "pearson y")
    if x.shape != y.shape:
        raise ShapeError(f"pearson: length mismatch, {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n < 2:
        raise ShapeError("pearson: need at least 2 samples")
    xm = x - x.mean()
    ym = y - y.mean()
    sx2 = float(np.dot(xm, xm))
    sy2 = float(np.dot(ym, ym))
    # Variance threshold: rounding alone turns an exactly-constant vector into
    # residuals of order eps*(1+|mean|); anything at that scale is "zero".
    tx = n * (1e-13 * (1.0 + abs(float(x.mean())))) ** 2
    ty = n * (1e-13 * (1.0 + abs(float(y.mean())))) ** 2
    if sx2 <= tx or sy2 <= ty:
        raise DegenerateInputError("pearson: zero-variance input")
    r = float(np.dot(xm, ym) / np.sqrt(sx2 * sy2))
    if not np.isfinite(r):
        raise NumericalError("pearson: non-finite result")
    return r


@dataclass(frozen=True)
class EigenPair:
    """Eigendecomposition of a symmetric matrix.

    values: eigenvalues in descending order, shape (n,).
    vectors: orthonormal eigenvectors as columns, column i pairs values[i].
    """

    values: np.ndarray
    vectors: np.ndarray


def sym_eig(s, max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenPair:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    The input must be square and symmetric to 1e-9 (absolute, relative to its
    magnitude).  Iteration stops once the off-diagonal Frobenius norm falls
    below 1e-12 times the input's Frobenius norm; failing to get there within
    ``max_sweeps`` full sweeps raises NumericalError.
    """
    s = as_matrix(s, "sym_eig arg")
    n = s.shape[0]
    if s.shape[0] != s.shape[1]:
        raise ShapeError(f"sym_eig: matrix must be square, got {s.shape}")
    scale = float(np.max(np.abs(s))) if n else 0.0
    if n and float(np.max(np.abs(s - s.T))) > 1e-9 * max(1.0, scale):
        raise ShapeError("sym_eig: matrix is not symmetric to 1e-9")

    a = 0.5 * (s + s.T)  # exact symmetrization; rotations below preserve it
    v = np.eye(n)
    threshold = JACOBI_REL_THRESHOLD * float(np.linalg.norm(s))

    def _off2() -> float:
        # sum over off-diagonal entries only; subtracting the diagonal from
        # the total would cancel catastrophically near convergence
        off = a.copy()
        np.fill_diagonal(off, 0.0)
        return float(np.sum(off * off))

    converged = False
    for _ in range(max_sweeps):
        if _off2() <= threshold * threshold:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                # rows p,q of a
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                # columns p,q of a
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                # accumulate the rotation into the eigenvector basis
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    if not converged and _off2() <= threshold * threshold:
        converged = True
    if not converged:
        raise NumericalError(
            f"sym_eig: no convergence within {max_sweeps} Jacobi sweeps"
        )

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigenPair(values=values[order], vectors=v[:, order].copy())
