"""Structured linear algebra for covariance matrices on regular lattices.

Symmetric Toeplitz factors, Kronecker products of them, and general
block-Toeplitz-with-Toeplitz-blocks (BTTB) operators are all applied through
circulant embedding and the FFT.  Conjugate gradients only needs the
resulting matrix-vector products.

Vectors may carry a trailing batch axis: ``v`` of shape ``(m,)`` or
``(m, k)``.  Lattice vectors are flattened in C order (axis 0 slowest), which
matches ``T_1 kron T_2 kron ... kron T_D``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.fft
import scipy.linalg

from .errors import ContractError, NumericalError

__all__ = [
    "SymToeplitz",
    "BttbSpec",
    "CgConfig",
    "CgStats",
    "toeplitz_mvm",
    "kron_mvm",
    "bttb_mvm",
    "offset_correlation",
    "bttb_bilinear",
    "cg_solve",
    "sym_eigvals",
    "kron_eigvals",
    "embed_size",
]


def embed_size(m: int) -> int:
    """Smallest power of two >= 2*m - 1."""
    n = 1
    while n < 2 * m - 1:
        n *= 2
    return n


def _offset_order(m: int) -> np.ndarray:
    # stencil index j holds offset j - (m-1); this lists offsets 0..m-1 then -(m-1)..-1
    return np.r_[m - 1 : 2 * m - 1, 0 : m - 1]


def _circulant_slots(m: int, n: int) -> np.ndarray:
    return np.r_[0:m, n - m + 1 : n]


@dataclass(frozen=True, eq=False)
class SymToeplitz:
    """Symmetric Toeplitz matrix given by its first column."""

    first_column: np.ndarray

    def __post_init__(self):
        col = np.asarray(self.first_column, dtype=np.float64)
        if col.ndim != 1 or col.size == 0:
            raise ContractError("first_column must be a non-empty 1-D array")
        if not np.all(np.isfinite(col)):
            raise ContractError("first_column has non-finite entries")
        object.__setattr__(self, "first_column", col)

    @property
    def size(self) -> int:
        return self.first_column.size

    @cached_property
    def _spectrum(self) -> np.ndarray:
        m = self.size
        n = embed_size(m)
        c = np.zeros(n)
        c[:m] = self.first_column
        if m > 1:
            c[n - m + 1 :] = self.first_column[:0:-1]
        return np.fft.rfft(c)

    def dense(self) -> np.ndarray:
        return scipy.linalg.toeplitz(self.first_column)


def toeplitz_mvm(t: SymToeplitz, v: np.ndarray) -> np.ndarray:
    """Multiply a symmetric Toeplitz matrix by ``v`` in O(m log m)."""
    v = np.asarray(v, dtype=np.float64)
    m = t.size
    if v.shape[0] != m:
        raise ContractError(f"toeplitz_mvm: vector length {v.shape[0]} != matrix size {m}")
    n = embed_size(m)
    spec = t._spectrum if v.ndim == 1 else t._spectrum.reshape((-1,) + (1,) * (v.ndim - 1))
    out = np.fft.irfft(spec * np.fft.rfft(v, n, axis=0), n, axis=0)
    return out[:m]


def kron_mvm(factors: Sequence[SymToeplitz], v: np.ndarray) -> np.ndarray:
    """Apply ``T_1 kron ... kron T_D`` to ``v`` without forming the product."""
    v = np.asarray(v, dtype=np.float64)
    dims = tuple(f.size for f in factors)
    m = int(np.prod(dims))
    if v.shape[0] != m:
        raise ContractError(f"kron_mvm: vector length {v.shape[0]} != product of factor sizes {m}")
    batch = v.shape[1:]
    x = v.reshape(dims + batch)
    for axis, t in enumerate(factors):
        if t.size == 1:
            x = x * t.first_column[0]
            continue
        x = np.moveaxis(x, axis, 0)
        shape = x.shape
        x = toeplitz_mvm(t, x.reshape(shape[0], -1)).reshape(shape)
        x = np.moveaxis(x, 0, axis)
    return x.reshape((m,) + batch)


@dataclass(frozen=True, eq=False)
class BttbSpec:
    """Stationary covariance on a D-dimensional lattice.

    ``gen[j_1, ..., j_D]`` is the kernel at lattice offset
    ``(j_1 - (m_1 - 1), ..., j_D - (m_D - 1))``, so ``gen`` has shape
    ``(2 m_1 - 1, ..., 2 m_D - 1)``.
    """

    dims: tuple
    gen: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        gen = np.asarray(self.gen, dtype=np.float64)
        if any(d < 1 for d in dims):
            raise ContractError("lattice sizes must be positive")
        expect = tuple(2 * d - 1 for d in dims)
        if gen.shape != expect:
            raise ContractError(f"stencil shape {gen.shape} != {expect}")
        if not np.all(np.isfinite(gen)):
            raise ContractError("stencil has non-finite entries")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "gen", gen)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def embed_shape(self) -> tuple:
        return tuple(embed_size(d) for d in self.dims)

    @cached_property
    def _spectrum(self) -> np.ndarray:
        shape = self.embed_shape
        c = np.zeros(shape)
        src = np.ix_(*[_offset_order(d) for d in self.dims])
        dst = np.ix_(*[_circulant_slots(d, n) for d, n in zip(self.dims, shape)])
        c[dst] = self.gen[src]
        return np.fft.rfftn(c)

    def dense(self) -> np.ndarray:
        """Materialize the m x m matrix (small lattices only)."""
        idx = np.indices(self.dims).reshape(len(self.dims), -1)
        diff = idx[:, :, None] - idx[:, None, :]
        off = tuple(diff[a] + (d - 1) for a, d in enumerate(self.dims))
        return self.gen[off]


_CHUNK_BYTES = 1 << 18


def bttb_mvm(b: BttbSpec, v: np.ndarray) -> np.ndarray:
    """Apply the BTTB matrix via D-dimensional circulant embedding.

    The last axis is transformed first; the remaining axes are then
    transformed, multiplied and inverted in slabs along the last axis so the
    working set stays cache-sized.  Zero padding is never transformed on the
    way in and every axis is cropped as soon as it is inverted.
    """
    v = np.asarray(v, dtype=np.float64)
    m = b.size
    if v.shape[0] != m:
        raise ContractError(f"bttb_mvm: vector length {v.shape[0]} != lattice size {m}")
    dims, shape = b.dims, b.embed_shape
    D = len(dims)
    batch = v.shape[1:]
    x = v.reshape(dims + batch)
    x = scipy.fft.rfft(x, shape[-1], axis=D - 1)
    spec = b._spectrum.reshape(b._spectrum.shape + (1,) * len(batch))
    if D > 1:
        nlast = x.shape[D - 1]
        per_slab = 16 * int(np.prod(shape[:-1])) * int(np.prod(batch, dtype=int))
        step = max(1, _CHUNK_BYTES // max(per_slab, 1))
        out = np.empty(dims[:-1] + (nlast,) + batch, dtype=np.complex128)
        for lo in range(0, nlast, step):
            sl = (slice(None),) * (D - 1) + (slice(lo, lo + step),)
            y = x[sl]
            for ax in range(D - 2, -1, -1):
                y = scipy.fft.fft(y, shape[ax], axis=ax)
            y *= spec[sl]
            for ax in range(D - 1):
                y = scipy.fft.ifft(y, axis=ax, overwrite_x=True)[(slice(None),) * ax + (slice(0, dims[ax]),)]
            out[sl] = y
        x = out
    else:
        x *= spec
    x = scipy.fft.irfft(x, shape[-1], axis=D - 1)
    x = x[(slice(None),) * (D - 1) + (slice(0, dims[-1]),)]
    return np.ascontiguousarray(x).reshape((m,) + batch)


def offset_correlation(x: np.ndarray, y: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Lattice cross-correlation ``C[o] = sum_j x[j + o] y[j]`` over all offsets.

    Extra trailing columns of ``x`` and ``y`` are summed over.  The result is
    laid out like a stencil, so ``x^T T(g) y == sum(g * C)`` for the BTTB
    matrix ``T(g)``.
    """
    dims = tuple(int(d) for d in dims)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.shape[0] != int(np.prod(dims)):
        raise ContractError("offset_correlation: shape mismatch")
    D = len(dims)
    batch = x.shape[1:]
    shape = tuple(embed_size(d) for d in dims)
    axes = tuple(range(D))
    fx = np.fft.rfftn(x.reshape(dims + batch), s=shape, axes=axes)
    fy = np.fft.rfftn(y.reshape(dims + batch), s=shape, axes=axes)
    prod = fx * np.conj(fy)
    if batch:
        prod = prod.reshape(prod.shape[:D] + (-1,)).sum(axis=-1)
    circ = np.fft.irfftn(prod, s=shape, axes=axes)
    out = np.empty(tuple(2 * d - 1 for d in dims))
    src = np.ix_(*[_circulant_slots(d, n) for d, n in zip(dims, shape)])
    dst = np.ix_(*[_offset_order(d) for d in dims])
    out[dst] = circ[src]
    return out


def bttb_bilinear(gen: np.ndarray, x: np.ndarray, y: np.ndarray, dims: Sequence[int]) -> float:
    """``x^T T(gen) y`` through the offset correlation of ``x`` and ``y``."""
    return float(np.sum(np.asarray(gen) * offset_correlation(x, y, dims)))


# --------------------------------------------------------------------------
# conjugate gradients


@dataclass(frozen=True)
class CgConfig:
    tol: float = 1e-10
    max_iters: int = 1000
    preconditioner: str = "none"

    def __post_init__(self):
        if not self.tol > 0:
            raise ContractError("CgConfig.tol must be > 0")
        if self.max_iters < 1:
            raise ContractError("CgConfig.max_iters must be >= 1")
        if self.preconditioner not in ("none", "diagonal"):
            raise ContractError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class CgStats:
    iters: int
    final_rel_residual: float
    converged: bool


def cg_solve(
    apply_A: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    cfg: Optional[CgConfig] = None,
    x0: Optional[np.ndarray] = None,
    diag: Optional[np.ndarray] = None,
):
    """Solve ``A x = b`` for SPD ``A`` given only ``apply_A``.

    Columns of a 2-D ``b`` are independent systems that share each operator
    application.  Iteration stops once every column satisfies
    ``||b - A x|| <= tol * ||b||``.  The reported residual is recomputed from
    scratch (one extra product), so it is the true residual, not the
    recursively updated one.

    Returns
    -------
    x : ndarray, same shape as ``b``
    stats : CgStats
        ``converged`` is False when ``max_iters`` ran out first.
    """
    cfg = cfg or CgConfig()
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise ContractError("cg_solve: right-hand side is not finite")
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    if cfg.preconditioner == "diagonal":
        if diag is None:
            raise ContractError("diagonal preconditioner needs the operator diagonal")
        inv_diag = 1.0 / np.asarray(diag, dtype=np.float64)[:, None]
    else:
        inv_diag = None

    def A(v):
        out = apply_A(v[:, 0] if vec else v)
        return out[:, None] if vec else out

    bnorm = np.linalg.norm(B, axis=0)
    live = bnorm > 0
    safe = np.where(live, bnorm, 1.0)
    if x0 is None:
        X = np.zeros_like(B)
        R = B.copy()
    else:
        X = np.array(x0, dtype=np.float64).reshape(B.shape)
        R = B - A(X)
    Z = R * inv_diag if inv_diag is not None else R
    P = Z.copy()
    rz = np.sum(R * Z, axis=0)
    active = live & (np.linalg.norm(R, axis=0) / safe > cfg.tol)

    iters = 0
    while active.any() and iters < cfg.max_iters:
        iters += 1
        AP = A(P)
        pAp = np.sum(P * AP, axis=0)
        alpha = np.where(active, rz / np.where(active, pAp, 1.0), 0.0)
        X += alpha * P
        R -= alpha * AP
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(R))):
            raise NumericalError(f"cg_solve: non-finite iterate at iteration {iters}")
        active &= np.linalg.norm(R, axis=0) / safe > cfg.tol
        if not active.any():
            break
        Z = R * inv_diag if inv_diag is not None else R
        rz_new = np.sum(R * Z, axis=0)
        beta = np.where(active, rz_new / np.where(active, rz, 1.0), 0.0)
        P = Z + beta * P
        rz = rz_new

    true_res = np.linalg.norm(B - A(X), axis=0) / safe if iters else np.linalg.norm(R, axis=0) / safe
    true_res = np.where(live, true_res, 0.0)
    rel = float(true_res.max()) if true_res.size else 0.0
    stats = CgStats(iters=iters, final_rel_residual=rel, converged=bool(rel <= cfg.tol))
    return (X[:, 0] if vec else X), stats


# --------------------------------------------------------------------------
# eigenvalues


def _check_symmetric(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("expected a square matrix")
    if not np.all(np.isfinite(A)):
        raise ContractError("matrix has non-finite entries")
    scale = max(np.abs(A).max(initial=0.0), 1e-300)
    if np.abs(A - A.T).max(initial=0.0) > 1e-10 * scale:
        raise ContractError("matrix is not symmetric")
    return A


def sym_eigvals(A: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a dense symmetric matrix."""
    return np.linalg.eigvalsh(_check_symmetric(A))


def sym_eig(A: np.ndarray):
    """Ascending eigenvalues and orthonormal eigenvectors (columns)."""
    return np.linalg.eigh(_check_symmetric(A))


def kron_eigvals(factors: Sequence[SymToeplitz]) -> np.ndarray:
    """Ascending eigenvalues of a Kronecker product from its factors."""
    lam = np.ones(1)
    for t in factors:
        lam = np.multiply.outer(lam, np.linalg.eigvalsh(t.dense())).ravel()
    return np.sort(lam)
