"""Dense complex linear algebra for the LMMSE filters.

Matrices are plain ``numpy`` complex arrays. Every function accepts leading
batch dimensions, so a stack of per-block (or per-sample) systems is solved
in one call.
"""

from __future__ import annotations

import numpy as np


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a Hermitian system is not positive definite after loading."""


def hermitian(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(np.asarray(a), -1, -2))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def default_loading(a: np.ndarray, scale: float = 1e-12) -> np.ndarray:
    """Diagonal loading ``scale * trace(a) / n`` (per batch entry)."""
    a = np.asarray(a)
    n = a.shape[-1]
    return scale * np.real(np.trace(a, axis1=-2, axis2=-1)) / n


def cholesky(a: np.ndarray, loading=0.0) -> np.ndarray:
    """Lower Cholesky factor of ``a + loading * I``.

    ``loading`` may be a scalar or an array matching the batch shape.
    """
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"square matrix required, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FactorizationError("non-finite entries in Hermitian system")
    loading = np.asarray(loading, dtype=float)
    if np.any(loading < 0):
        raise ValueError("loading must be non-negative")
    n = a.shape[-1]
    if np.any(loading):
        a = a + loading[..., None, None] * np.eye(n)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"matrix is not positive definite: {exc}") from None


def _forward(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = low.shape[-1]
    x = np.empty(np.broadcast_shapes(low.shape[:-2], b.shape[:-2]) + b.shape[-2:],
                 dtype=np.complex128)
    for i in range(n):
        acc = b[..., i, :]
        if i:
            acc = acc - np.einsum("...j,...jk->...k", low[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / low[..., i, i, None]
    return x


def _backward(up: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = up.shape[-1]
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        acc = b[..., i, :]
        if i < n - 1:
            acc = acc - np.einsum("...j,...jk->...k", up[..., i, i + 1:], x[..., i + 1:, :])
        x[..., i, :] = acc / up[..., i, i, None]
    return x


def cho_solve(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``L L^H X = b`` given the lower factor."""
    b = np.asarray(b, dtype=np.complex128)
    return _backward(hermitian(low), _forward(low, b))


def solve_hpd(a: np.ndarray, b: np.ndarray, loading=0.0) -> np.ndarray:
    """Solve ``(a + loading I) X = b`` for Hermitian positive definite ``a``.

    Raises :class:`FactorizationError` instead of returning garbage when the
    loaded matrix is not positive definite.
    """
    b = np.asarray(b)
    a = np.asarray(a)
    if b.ndim < 2 or b.shape[-2] != a.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs rhs {b.shape}")
    return cho_solve(cholesky(a, loading), b)
