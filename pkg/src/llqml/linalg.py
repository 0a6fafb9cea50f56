"""Small dense matrix kernels: vectorization, Kronecker algebra, expm, Cholesky.

``vec`` is column-stacking throughout the package, so that
``vec(B @ X @ A.T) == kron(A, B) @ vec(X)``.

Most functions accept a leading batch dimension, since moment propagation
advances every observation interval at once.
"""

from __future__ import annotations

from math import factorial

import numpy as np

from .errors import NonFiniteMatrix, NonPositiveDefinite

PADE_DEGREE = 6
# scaling target for the 1-norm of A / 2**s
PADE_NORM_BOUND = 0.5


def _pade_coefficients(q: int) -> np.ndarray:
    return np.array(
        [
            factorial(2 * q - k) * factorial(q)
            / (factorial(2 * q) * factorial(k) * factorial(q - k))
            for k in range(q + 1)
        ]
    )


_PADE_C = _pade_coefficients(PADE_DEGREE)


def vec(M: np.ndarray) -> np.ndarray:
    """Column-stack a square matrix (or a stack of them) into a vector."""
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError(f"vec expects square matrices, got shape {M.shape}")
    d = M.shape[-1]
    return np.swapaxes(M, -1, -2).reshape(M.shape[:-2] + (d * d,))


def unvec(v: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=float)
    return np.swapaxes(v.reshape(v.shape[:-1] + (d, d)), -1, -2)


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.kron(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def batch_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product over a shared leading batch axis.

    ``A`` is (K, p, q), ``B`` is (K, r, s); the result is (K, p*r, q*s).
    """
    K, p, q = A.shape
    _, r, s = B.shape
    return (A[:, :, None, :, None] * B[:, None, :, None, :]).reshape(K, p * r, q * s)


def kron_sum(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker sum ``A (x) I + I (x) B``.

    For square ``A``, ``B`` of size n this is the usual n^2 x n^2 sum. For two
    vectors of length d it returns the d^2 x d matrix ``a (x) I_d + I_d (x) b``,
    which maps y to ``vec(b y^T + y a^T)``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"kron_sum shape mismatch: {A.shape} vs {B.shape}")
    if A.ndim == 1:
        d = A.shape[0]
        eye = np.eye(d)
        return np.kron(A[:, None], eye) + np.kron(eye, B[:, None])
    if A.ndim == 2 and A.shape[0] == A.shape[1]:
        eye = np.eye(A.shape[0])
        return np.kron(A, eye) + np.kron(eye, B)
    raise ValueError(f"kron_sum expects square matrices or vectors, got {A.shape}")


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential by diagonal Pade approximant with scaling and squaring.

    Accepts a single (n, n) matrix or a (K, n, n) stack. Each matrix in a stack
    is scaled independently, so a result never depends on its batch neighbours.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expm expects square matrices, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteMatrix("expm argument has non-finite entries")
    single = A.ndim == 2
    X = A[None] if single else A.reshape((-1,) + A.shape[-2:])
    n = X.shape[-1]

    norms = np.abs(X).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(
            norms > PADE_NORM_BOUND,
            np.ceil(np.log2(norms / PADE_NORM_BOUND)),
            0.0,
        ).astype(int)
    X = X * np.ldexp(1.0, -s)[:, None, None]

    c = _PADE_C
    eye = np.broadcast_to(np.eye(n), X.shape)
    X2 = X @ X
    X4 = X2 @ X2
    X6 = X4 @ X2
    U = X @ (c[1] * eye + c[3] * X2 + c[5] * X4)
    V = c[0] * eye + c[2] * X2 + c[4] * X4 + c[6] * X6
    R = np.linalg.solve(V - U, V + U)

    for j in range(int(s.max(initial=0))):
        idx = s > j
        R[idx] = R[idx] @ R[idx]

    if single:
        return R[0]
    return R.reshape(A.shape)


def chol_logdet_quad(S: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(log det S, r^T S^{-1} r)`` from a Cholesky factorization.

    ``S`` is symmetrized before factorizing. Works on a single (d, d) matrix
    or a (K, d, d) stack with ``r`` of matching shape (d,) or (K, d).

    Raises
    ------
    NonPositiveDefinite
        If any matrix is not positive definite or contains non-finite values.
    """
    S = np.asarray(S, dtype=float)
    r = np.asarray(r, dtype=float)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(r))):
        raise NonPositiveDefinite("covariance or residual has non-finite entries")
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefinite(str(exc)) from None
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag <= 0.0):
        raise NonPositiveDefinite("zero pivot in Cholesky factor")
    logdet = 2.0 * np.log(diag).sum(axis=-1)
    w = np.linalg.solve(L, r[..., None])[..., 0]
    quad = (w * w).sum(axis=-1)
    if S.ndim == 2:
        return float(logdet), float(quad)
    return logdet, quad
