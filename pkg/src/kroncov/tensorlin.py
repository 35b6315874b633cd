"""Index arithmetic and dense linear algebra for Kronecker-structured matrices.

Conventions
-----------
A vector of length ``n = n_1 * ... * n_v`` is indexed row-major over the
multi-index ``(i_1, ..., i_v)`` with ``i_1`` varying slowest, which is the
ordering produced by ``np.kron``.  All indices are 0-based here.
"""

from __future__ import annotations

import math
import string
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import lapack

#: Largest order :func:`kron_materialize` will build without ``cap`` being raised.
MATERIALIZE_CAP = 4096

SYMMETRY_RTOL = 1e-10
PIVOT_RTOL = 1e-12


class AsymmetryWarning(UserWarning):
    """Input to :func:`sym` deviated from symmetry beyond roundoff."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot falls below tolerance.

    ``pivot`` is the 0-based index of the failing diagonal position.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


@dataclass(frozen=True)
class FactorShape:
    """Factorization ``(n_1, ..., n_v)`` of the cross-section dimension."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) == 0:
            raise ValueError("shape needs at least one factor")
        if any(d < 2 for d in dims):
            raise ValueError(f"every factor dimension must be >= 2, got {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def parse(cls, spec: str | Sequence[int] | "FactorShape") -> "FactorShape":
        """Build from ``"2x5x2"``, a sequence of ints, or an existing shape."""
        if isinstance(spec, FactorShape):
            return spec
        if isinstance(spec, str):
            parts = spec.lower().replace("*", "x").split("x")
            try:
                return cls(tuple(int(p) for p in parts))
            except ValueError as exc:
                raise ValueError(f"cannot parse shape {spec!r}: {exc}") from None
        return cls(tuple(spec))

    @property
    def n(self) -> int:
        return math.prod(self.dims)

    @property
    def v(self) -> int:
        return len(self.dims)

    def complement(self, h: int) -> int:
        """``n / n_h`` for the 1-based factor index ``h``."""
        return self.n // self.dims[self._check_h(h) - 1]

    def _check_h(self, h: int) -> int:
        if not 1 <= h <= self.v:
            raise ValueError(f"factor index h={h} outside 1..{self.v}")
        return h

    def __str__(self) -> str:
        return "x".join(str(d) for d in self.dims)

    def __iter__(self):
        return iter(self.dims)

    def __len__(self) -> int:
        return self.v


def sym(A, *, name: str = "matrix") -> np.ndarray:
    """Return ``(A + A.T) / 2`` as a float array, validating shape and finiteness.

    Warns with :class:`AsymmetryWarning` if the input was asymmetric beyond
    ``1e-10 * max|A|``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    scale = np.max(np.abs(A)) if A.size else 0.0
    if A.size and np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
        warnings.warn(f"{name} is not symmetric; symmetrizing", AsymmetryWarning, stacklevel=2)
    return 0.5 * (A + A.T)


def linear_index(multi: Sequence[int], shape: FactorShape | Sequence[int]) -> int:
    shape = FactorShape.parse(shape)
    if len(multi) != shape.v:
        raise ValueError(f"multi-index has {len(multi)} components, shape has {shape.v}")
    idx = 0
    for i, d in zip(multi, shape.dims):
        if not 0 <= i < d:
            raise ValueError(f"index component {i} outside 0..{d - 1}")
        idx = idx * d + int(i)
    return idx


def rotation_map(shape: FactorShape | Sequence[int], h: int) -> np.ndarray:
    """Index permutation that brings factor ``h`` (1-based) to the front.

    ``forward[p]`` is the original linear index of the element whose rotated
    multi-index ``(i_h, ..., i_v, i_1, ..., i_{h-1})`` has linear index ``p``.
    Conjugating ``A`` as ``A[np.ix_(forward, forward)]`` equals
    ``K_{a,b} A K_{b,a}`` with ``a = n_h...n_v`` and ``b = n_1...n_{h-1}``.
    """
    shape = FactorShape.parse(shape)
    shape._check_h(h)
    grid = np.arange(shape.n).reshape(shape.dims)
    axes = list(range(h - 1, shape.v)) + list(range(h - 1))
    return np.transpose(grid, axes).reshape(-1)


def partial_trace(A, n1: int) -> np.ndarray:
    """Matrix of block traces of ``A`` viewed as ``n1 x n1`` blocks."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    if n1 < 1 or n % n1:
        raise ValueError(f"order {n} is not divisible by block count {n1}")
    m = n // n1
    return np.einsum("ikjk->ij", A.reshape(n1, m, n1, m))


def rotated_partial_trace(A, shape: FactorShape | Sequence[int], h: int) -> np.ndarray:
    """Partial trace of ``A`` onto factor ``h`` after rotating it to the front.

    Computed by contracting every other factor's row and column index of the
    tensor view of ``A``; the rotated matrix is never formed.
    """
    shape = FactorShape.parse(shape)
    shape._check_h(h)
    A = np.asarray(A, dtype=float)
    if A.shape != (shape.n, shape.n):
        raise ValueError(f"matrix of shape {A.shape} does not match factor shape {shape} (n={shape.n})")
    v = shape.v
    if v > 12:
        # einsum subscripts would run out; fall back to explicit rotation
        perm = rotation_map(shape, h)
        return partial_trace(A[np.ix_(perm, perm)], shape.dims[h - 1])
    letters = string.ascii_letters
    rows = list(letters[:v])
    cols = list(letters[:v])
    cols[h - 1] = letters[v]
    subscripts = "".join(rows) + "".join(cols) + "->" + rows[h - 1] + cols[h - 1]
    return np.einsum(subscripts, A.reshape(shape.dims + shape.dims))


def kron_materialize(factors: Sequence, scale: float = 1.0, *, cap: int = MATERIALIZE_CAP) -> np.ndarray:
    factors = [np.asarray(F, dtype=float) for F in factors]
    if not factors:
        raise ValueError("need at least one factor")
    order = math.prod(F.shape[0] for F in factors)
    if order > cap:
        raise MemoryError(f"refusing to materialize a {order}x{order} Kronecker product (cap {cap})")
    out = np.array([[float(scale)]])
    for F in factors:
        out = np.kron(out, F)
    return out


def kron_matvec(factors: Sequence, scale: float, x) -> np.ndarray:
    """Compute ``scale * (F_1 kron ... kron F_v) @ x`` without forming the product.

    ``x`` may be a vector of length ``n`` or a ``(T, n)`` array of row vectors,
    in which case the operator is applied to every row.
    """
    factors = [np.asarray(F, dtype=float) for F in factors]
    dims = tuple(F.shape[1] for F in factors)
    n = math.prod(dims)
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    X = x if batched else x[None, :]
    if X.shape[1] != n:
        raise ValueError(f"vector length {X.shape[1]} does not match Kronecker order {n}")
    Y = X.reshape((X.shape[0],) + dims)
    for j, F in enumerate(factors):
        # contract axis j+1 with F's columns, then put the new axis back in place
        Y = np.moveaxis(np.tensordot(Y, F, axes=([j + 1], [1])), -1, j + 1)
    out = scale * Y.reshape(X.shape[0], -1)
    return out if batched else out[0]


def cholesky(A) -> np.ndarray:
    """Lower Cholesky factor, raising :class:`NotPositiveDefiniteError` on failure.

    A pivot counts as failed when ``L[k, k]**2 <= 1e-12 * max(diag(A))``.
    """
    A = sym(A)
    n = A.shape[0]
    if n == 0:
        return A.copy()
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:  # pragma: no cover - argument error from LAPACK
        raise ValueError(f"dpotrf rejected argument {-info}")
    dmax = np.max(np.diag(A))
    piv = np.diag(L) ** 2
    bad = np.flatnonzero(piv <= PIVOT_RTOL * dmax)
    if dmax <= 0 or bad.size:
        raise NotPositiveDefiniteError(int(bad[0]) if bad.size else 0)
    return L


def invert_spd(A) -> np.ndarray:
    L = cholesky(A)
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:  # pragma: no cover - dpotri only fails if L is singular
        raise NotPositiveDefiniteError(max(info - 1, 0))
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def norms(A) -> dict[str, float]:
    """Frobenius, entrywise l1 and spectral norm of a symmetric matrix."""
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    eig = np.linalg.eigvalsh(sym(A))
    return {
        "frobenius": float(np.sqrt(np.sum(A * A))),
        "entrywise_l1": float(np.sum(np.abs(A))),
        "spectral": float(np.max(np.abs(eig))) if eig.size else 0.0,
    }
