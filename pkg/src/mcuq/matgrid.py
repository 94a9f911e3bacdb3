"""Dense matrix helpers: validation, truncated SVD, norms and incoherence.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Functions here
never mutate their inputs.

Singular vectors of repeated singular values are only defined up to a
rotation of their subspace; callers should rely on projectors such as
``U @ U.T`` rather than on individual columns in that case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SvdTriple",
    "as_matrix",
    "truncated_svd",
    "norm_2inf",
    "norm_fro",
    "norm_spectral",
    "norm_max",
    "incoherence",
    "check_orthonormal",
]

# Above this size a full LAPACK SVD is replaced by subspace iteration.
DENSE_SVD_LIMIT = 2000


@dataclass(frozen=True)
class SvdTriple:
    """Top-r singular triple ``A_r = U @ diag(sigma) @ V.T``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def as_matrix(A, name: str = "matrix") -> np.ndarray:
    """Return ``A`` as a finite 2-D float64 array or raise ``ValueError``."""
    arr = np.asarray(A, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _fix_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # np.argmax returns the first maximiser, so ties go to the lowest row.
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def _subspace_svd(A: np.ndarray, r: int, tol: float = 1e-10, max_sweeps: int = 500):
    m, n = A.shape
    k = min(min(m, n), r + 10)
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(A @ rng.standard_normal((n, k)))
    prev = None
    for _ in range(max_sweeps):
        Z, _ = np.linalg.qr(A.T @ Q)
        Q, _ = np.linalg.qr(A @ Z)
        s = np.linalg.svd(Q.T @ A, compute_uv=False)[:r]
        if prev is not None and np.max(np.abs(s - prev)) <= tol * max(s[0], 1e-300):
            break
        prev = s
    Ub, s, Vt = np.linalg.svd(Q.T @ A, full_matrices=False)
    return Q @ Ub[:, :r], s[:r], Vt[:r].T


def truncated_svd(A, r: int) -> SvdTriple:
    """Top-``r`` singular triple of ``A``.

    Columns of ``U`` are signed so that their largest-magnitude entry is
    nonnegative (ties resolved towards the lowest row index), with ``V``
    flipped accordingly; this makes the output deterministic.
    """
    A = as_matrix(A, "A")
    m, n = A.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank r={r} outside [1, {min(m, n)}]")
    if min(m, n) <= DENSE_SVD_LIMIT:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        U, s, V = U[:, :r], s[:r], Vt[:r].T
    else:
        U, s, V = _subspace_svd(A, r)
    U, V = _fix_signs(np.ascontiguousarray(U), np.ascontiguousarray(V))
    return SvdTriple(U=U, sigma=np.maximum(s, 0.0), V=V)


def norm_2inf(A) -> float:
    """Largest row Euclidean norm."""
    A = as_matrix(A)
    if A.size == 0:
        return 0.0
    return float(np.sqrt(np.max(np.sum(A * A, axis=1))))


def norm_fro(A) -> float:
    return float(np.linalg.norm(as_matrix(A), "fro"))


def norm_max(A) -> float:
    A = as_matrix(A)
    return float(np.max(np.abs(A))) if A.size else 0.0


def norm_spectral(A, tol: float = 1e-8, max_iters: int = 100_000) -> float:
    """Largest singular value by power iteration on ``A.T @ A``.

    Stops once the eigen-residual ``||A.T A v - theta v||`` falls below
    ``tol * theta``.
    """
    A = as_matrix(A)
    if A.size == 0 or not np.any(A):
        return 0.0
    n = A.shape[1]
    # Fixed, generic start vector keeps the result deterministic.
    v = 1.0 + np.sin(np.arange(1, n + 1, dtype=np.float64))
    v /= np.linalg.norm(v)
    theta = 0.0
    for _ in range(max_iters):
        w = A.T @ (A @ v)
        theta = float(v @ w)
        res = np.linalg.norm(w - theta * v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # Start vector in the null space; restart from a basis vector.
            v = np.zeros(n)
            v[int(np.argmax(np.sum(A * A, axis=0)))] = 1.0
            continue
        v = w / nw
        if res <= tol * theta:
            break
    return float(np.sqrt(max(theta, 0.0)))


def check_orthonormal(Q, name: str = "matrix", tol: float = 1e-8) -> np.ndarray:
    Q = as_matrix(Q, name)
    gram = Q.T @ Q
    if np.max(np.abs(gram - np.eye(Q.shape[1])), initial=0.0) > tol:
        raise ValueError(f"{name} does not have orthonormal columns")
    return Q


def incoherence(U, V, r: int | None = None) -> float:
    """Smallest ``mu`` with ``||U||_{2,inf}^2 <= mu r / m`` and likewise for V."""
    U = check_orthonormal(U, "U")
    V = check_orthonormal(V, "V")
    if r is None:
        r = U.shape[1]
    if U.shape[1] != r or V.shape[1] != r:
        raise ValueError("U and V must both have r columns")
    m, n = U.shape[0], V.shape[0]
    return max(m / r * norm_2inf(U) ** 2, n / r * norm_2inf(V) ** 2)
