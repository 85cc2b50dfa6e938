"""Inducing lattice and sparse local cubic interpolation.

Interpolation uses the Keys cubic convolution kernel (a = -0.5) as a tensor
product over axes, so every row of ``M`` has ``4**d`` non-zeros.  The kernel
is C1, which is what lets gradients flow through ``M`` into the points being
interpolated.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse

from .errors import ContractError, GridRangeError

KEYS_A = -0.5


def keys_weight(x):
    """Keys cubic convolution kernel W(x), support |x| < 2."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    a = KEYS_A
    near = ((a + 2) * ax - (a + 3)) * ax * ax + 1
    far = ((a * ax - 5 * a) * ax + 8 * a) * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def keys_deriv(x):
    """dW/dx."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    a = KEYS_A
    near = (3 * (a + 2) * ax - 2 * (a + 3)) * ax
    far = (3 * a * ax - 10 * a) * ax + 8 * a
    return np.sign(x) * np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@dataclass(frozen=True)
class GridSpec:
    """Regular lattice: per axis ``counts[d]`` nodes from ``lo[d]`` to ``hi[d]`` inclusive.

    ``core_lo``/``core_hi`` record the data box the grid was built around;
    training uses it to decide when features have drifted far enough to
    rebuild.
    """

    lo: tuple
    hi: tuple
    counts: tuple
    core_lo: Optional[tuple] = None
    core_hi: Optional[tuple] = None

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        counts = tuple(int(c) for c in self.counts)
        if not (len(lo) == len(hi) == len(counts)) or not counts:
            raise ContractError("GridSpec: lo, hi and counts must have the same non-zero length")
        for d, (a, b, c) in enumerate(zip(lo, hi, counts)):
            if c < 4:
                raise ContractError(f"GridSpec axis {d}: cubic interpolation needs >= 4 nodes, got {c}")
            if not (np.isfinite(a) and np.isfinite(b) and b > a):
                raise ContractError(f"GridSpec axis {d}: need finite max > min, got [{a}, {b}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "counts", counts)
        for name in ("core_lo", "core_hi"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(v) for v in val))

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def m(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> tuple:
        return tuple((b - a) / (c - 1) for a, b, c in zip(self.lo, self.hi, self.counts))

    def axis_nodes(self, d: int) -> np.ndarray:
        return np.linspace(self.lo[d], self.hi[d], self.counts[d])

    def nodes(self) -> np.ndarray:
        """All lattice points, shape (m, d), in C (row-major) order."""
        mesh = np.meshgrid(*[self.axis_nodes(d) for d in range(self.dim)], indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def interpolable_bounds(self):
        """Per-axis [lo + h, hi - h]: one node of margin for the cubic stencil."""
        h = np.array(self.spacing)
        return np.array(self.lo) + h, np.array(self.hi) - h

    def core_window(self):
        """Per axis ``(start, count)`` of the node block covering the recorded data box.

        The box is snapped outward to nodes.  Without a recorded box the
        whole axis is returned.
        """
        if self.core_lo is None:
            return tuple((0, c) for c in self.counts)
        out = []
        for a, h in enumerate(self.spacing):
            i0 = int(np.floor((self.core_lo[a] - self.lo[a]) / h + 1e-9))
            i1 = int(np.ceil((self.core_hi[a] - self.lo[a]) / h - 1e-9))
            i0, i1 = max(i0, 0), min(i1, self.counts[a] - 1)
            out.append((i0, max(i1 - i0 + 1, 1)))
        return tuple(out)

    def to_dict(self) -> dict:
        d = {"min": list(self.lo), "max": list(self.hi), "count": list(self.counts)}
        if self.core_lo is not None:
            d["core_min"], d["core_max"] = list(self.core_lo), list(self.core_hi)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["min"], d["max"], d["count"], d.get("core_min"), d.get("core_max"))


def build_grid(Z, nodes_per_axis: Union[int, Sequence[int]], padding: float = 0.25) -> GridSpec:
    """Lattice covering ``Z`` with ``padding * range`` added on each side.

    A zero-range axis becomes ``[c - 0.5, c + 0.5]``.  If ``padding`` is too
    small to leave one node of margin for the cubic stencil it is raised to
    the smallest value that does.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[0] < 1:
        raise ContractError("build_grid needs at least one point")
    if not np.all(np.isfinite(Z)):
        raise ContractError("build_grid: non-finite coordinates")
    d = Z.shape[1]
    counts = [int(nodes_per_axis)] * d if np.isscalar(nodes_per_axis) else [int(c) for c in nodes_per_axis]
    if len(counts) != d:
        raise ContractError(f"nodes_per_axis has {len(counts)} entries for {d} axes")
    if min(counts) < 4:
        raise ContractError("nodes_per_axis must be >= 4")
    zmin, zmax = Z.min(axis=0), Z.max(axis=0)
    lo, hi = [], []
    for a in range(d):
        r = zmax[a] - zmin[a]
        if r <= 0:
            lo.append(zmin[a] - 0.5)
            hi.append(zmin[a] + 0.5)
            continue
        pad = max(padding, (1.0 + 1e-9) / (counts[a] - 3))
        lo.append(zmin[a] - pad * r)
        hi.append(zmax[a] + pad * r)
    return GridSpec(tuple(lo), tuple(hi), tuple(counts), tuple(zmin), tuple(zmax))


@dataclass(eq=False)
class SparseInterp:
    """Rows of ``M``: ``idx``/``w`` have shape (n, 4**d); ``dw`` is (n, d, 4**d)."""

    idx: np.ndarray
    w: np.ndarray
    m: int
    dw: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.idx.shape != self.w.shape:
            raise ContractError("SparseInterp: index/weight shape mismatch")
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= self.m):
            raise ContractError("SparseInterp: lattice index out of bounds")

    @property
    def n(self) -> int:
        return self.idx.shape[0]

    @cached_property
    def matrix(self) -> scipy.sparse.csr_matrix:
        n, k = self.idx.shape
        return scipy.sparse.csr_matrix(
            (self.w.ravel(), self.idx.ravel(), np.arange(0, n * k + 1, k)), shape=(n, self.m)
        )

    @cached_property
    def matrix_t(self) -> scipy.sparse.csr_matrix:
        return self.matrix.T.tocsr()

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _axis_weights(t: np.ndarray, count: int, axis: int):
    """Indices, weights and d(weights)/dt of the 4-node stencil along one axis."""
    tol = 1e-9
    bad = (t < 1 - tol) | (t > count - 2 + tol) | ~np.isfinite(t)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise GridRangeError(
            f"point {i} lies outside the interpolable range of axis {axis} "
            f"(fractional node {t[i]:.4g}, allowed [1, {count - 2}]); rebuild or widen the grid",
            axis=axis,
        )
    t = np.clip(t, 1.0, count - 2.0)
    base = np.clip(np.floor(t).astype(np.int64), 1, count - 3)
    nodes = base[:, None] + np.arange(-1, 3)[None, :]
    x = t[:, None] - nodes
    return nodes, keys_weight(x), keys_deriv(x)


def interp_rows(Z, grid: GridSpec, with_derivs: bool = False) -> SparseInterp:
    """Interpolation rows for every point of ``Z`` (shape (n, d))."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    n, d = Z.shape
    if d != grid.dim:
        raise ContractError(f"points have {d} coordinates, grid has {grid.dim} axes")
    strides = np.cumprod((grid.counts[1:] + (1,))[::-1])[::-1]
    per_axis = []
    for a in range(d):
        t = (Z[:, a] - grid.lo[a]) / grid.spacing[a]
        per_axis.append(_axis_weights(t, grid.counts[a], a))

    idx = np.zeros((n, 1), dtype=np.int64)
    w = np.ones((n, 1))
    for a, (nodes, wa, _) in enumerate(per_axis):
        idx = (idx[:, :, None] + nodes[:, None, :] * strides[a]).reshape(n, -1)
        w = (w[:, :, None] * wa[:, None, :]).reshape(n, -1)

    dw = None
    if with_derivs:
        dw = np.empty((n, d, 4**d))
        for target in range(d):
            acc = np.ones((n, 1))
            for a, (_, wa, da) in enumerate(per_axis):
                fac = da / grid.spacing[a] if a == target else wa
                acc = (acc[:, :, None] * fac[:, None, :]).reshape(n, -1)
            dw[:, target, :] = acc
    return SparseInterp(idx, w, grid.m, dw)


def interp_row(z, grid: GridSpec, with_derivs: bool = False) -> SparseInterp:
    """Single-point convenience wrapper around :func:`interp_rows`."""
    return interp_rows(np.asarray(z, dtype=np.float64).reshape(1, -1), grid, with_derivs)


def spmv(rows: SparseInterp, v: np.ndarray) -> np.ndarray:
    """``M @ v``; ``v`` is (m,) or (m, k)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != rows.m:
        raise ContractError(f"spmv: vector length {v.shape[0]} != lattice size {rows.m}")
    return rows.matrix @ v


def spmv_t(rows: SparseInterp, u: np.ndarray) -> np.ndarray:
    """``M.T @ u``; ``u`` is (n,) or (n, k)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[0] != rows.n:
        raise ContractError(f"spmv_t: vector length {u.shape[0]} != number of rows {rows.n}")
    return rows.matrix_t @ u


def interp_gradient(rows: SparseInterp, v: np.ndarray) -> np.ndarray:
    """Spatial gradient of the interpolant of lattice values ``v`` at each row's point.

    Returns (n, d) for ``v`` of shape (m,), or (n, d, k) for (m, k).
    """
    if rows.dw is None:
        raise ContractError("interp_gradient needs rows built with_derivs=True")
    v = np.asarray(v, dtype=np.float64)
    gathered = v[rows.idx]  # (n, K) or (n, K, k)
    if v.ndim == 1:
        return np.einsum("ndk,nk->nd", rows.dw, gathered)
    return np.einsum("ndk,nkb->ndb", rows.dw, gathered)
