"""Small dense kernels on float64 numpy arrays.

Every function here is pure: inputs are never modified and a fresh array is
returned. Arrays are coerced to ``float64`` on entry so that downstream
invariant checks are not polluted by float32 accumulation noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "SvdResult",
    "as_tensor",
    "matmul",
    "frobenius_norm",
    "truncated_svd",
    "scale_columns",
    "scale_rows",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def as_tensor(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _require_2d(a: np.ndarray, name: str) -> None:
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = as_tensor(a)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class SvdResult:
    """Thin factorisation ``a ~= u @ diag(singular_values) @ v.T``.

    ``u`` is m x k, ``v`` is n x k, singular values are non-increasing.
    """

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.singular_values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def truncated_svd(a, r: int) -> SvdResult:
    """Best rank-``min(m, n, r)`` approximation of ``a`` in Frobenius norm.

    Sign convention: the largest-magnitude entry of every ``v`` column is
    positive (ties go to the first such entry), which makes the factors
    deterministic for golden comparisons.
    """
    if int(r) != r or r < 1:
        raise ValueError(f"rank must be a positive integer, got {r!r}")
    a = as_tensor(a)
    _require_2d(a, "a")
    m, n = a.shape
    k = min(m, n, int(r))
    # LAPACK returns a complete orthonormal basis even for zero singular
    # values, so no explicit completion step is needed.
    u, sigma, vt = np.linalg.svd(a, full_matrices=False)
    u = u[:, :k]
    sigma = np.maximum(sigma[:k], 0.0)
    v = vt[:k].T
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[pivots, np.arange(k)] < 0, -1.0, 1.0)
    return SvdResult(u=u * signs, singular_values=sigma, v=v * signs)


def _scale_vector(s, length: int) -> np.ndarray:
    s = as_tensor(s)
    if s.ndim != 1 or s.shape[0] != length:
        raise ShapeError(f"scale vector of shape {s.shape} does not match dimension {length}")
    return s


def scale_columns(a, s) -> np.ndarray:
    """Multiply column ``j`` (the last axis) by ``s[j]``."""
    a = as_tensor(a)
    if a.ndim < 1:
        raise ShapeError("cannot scale a scalar")
    return a * _scale_vector(s, a.shape[-1])


def scale_rows(a, s) -> np.ndarray:
    """Multiply row ``i`` of a 2-D array by ``s[i]``."""
    a = as_tensor(a)
    _require_2d(a, "a")
    return a * _scale_vector(s, a.shape[0])[:, None]
