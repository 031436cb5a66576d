"""Dense real linear algebra substrate.

Matrices are plain 2-D float64 numpy arrays, validated at public entry
points by `as_matrix`.  Factorizations are deterministic for identical
input bits: they go through LAPACK's deterministic drivers and a fixed
column-sign convention (largest-magnitude entry of each left factor
column is made positive), so repeated runs produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidRank,
    IterationLimitExceeded,
    NotSquare,
    NotSymmetric,
)

SYMMETRY_TOL = 1e-8


def as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return `a` as a finite 2-D float64 array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return m


def _fix_column_signs(u: np.ndarray, v: np.ndarray | None = None):
    """Flip factor columns so each u column's largest-|entry| is positive."""
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            if v is not None:
                v[:, j] = -v[:, j]


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD A = U diag(S) Vt with orthonormal U, V columns, S nonincreasing."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def svd(a: np.ndarray) -> SvdResult:
    """Deterministic thin SVD with the package sign convention."""
    a = as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise IterationLimitExceeded(f"SVD failed to converge: {exc}") from exc
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(vt.T)
    _fix_column_signs(u, v)
    return SvdResult(u=u, s=s, v=v)


def sym_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues nonincreasing, eigenvectors as columns).  The input
    is symmetrized as (A + At)/2 after checking max|A - At| <= 1e-8.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise NotSquare(f"shape {a.shape} is not square")
    skew = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if skew > SYMMETRY_TOL:
        raise NotSymmetric(f"max|A - At| = {skew:.3e} exceeds {SYMMETRY_TOL}")
    sym = (a + a.T) / 2.0
    try:
        w, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise IterationLimitExceeded(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(w)[::-1]
    w = np.ascontiguousarray(w[order])
    vecs = np.ascontiguousarray(vecs[:, order])
    _fix_column_signs(vecs)
    return w, vecs


def pinv(a: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD, zeroing sigma < rcond * sigma_max."""
    if not 0.0 < rcond < 1.0:
        raise ValueError(f"rcond must be in (0, 1), got {rcond}")
    res = svd(a)
    cutoff = rcond * (res.s[0] if res.s.size else 0.0)
    inv_s = np.where(res.s > cutoff, 1.0 / np.where(res.s > 0, res.s, 1.0), 0.0)
    return (res.v * inv_s) @ res.u.T


def best_rank_k(a: np.ndarray, k: int) -> np.ndarray:
    """Eckart-Young optimal rank-k approximation."""
    a = as_matrix(a)
    if not 1 <= k <= min(a.shape):
        raise InvalidRank(f"k={k} outside [1, {min(a.shape)}]")
    res = svd(a)
    return (res.u[:, :k] * res.s[:k]) @ res.v[:, :k].T


def fro_norm_sq(a: np.ndarray) -> float:
    """Squared Frobenius norm: sum of squared entries."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value."""
    s = svd(a).s
    return float(s[0]) if s.size else 0.0


def numerical_rank(s: np.ndarray, rcond: float = 1e-12) -> int:
    """Number of singular values above rcond * sigma_max."""
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.sum(s > rcond * s[0]))
