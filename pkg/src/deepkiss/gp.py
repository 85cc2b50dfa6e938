"""Exact and KISS-GP deep-kernel regression.

The deep kernel is ``k(g(x, w), g(x', w) | theta)`` with ``g`` a ReLU network
(or the identity).  The exact path factorizes the dense covariance and exists
as an oracle and small-n baseline.  The KISS path approximates

    K  ~=  M K_UU M^T

with ``M`` sparse cubic interpolation onto a lattice ``U`` and ``K_UU``
applied through FFTs, so a covariance product costs O(n + m log m).

Gradient modes for :func:`kiss_mll_grads`:

``"scaled_eig"`` (default)
    The exact derivative of the objective :func:`kiss_mll` reports.  The
    complexity term is differentiated through the cached eigendecomposition
    of ``K_UU``.  That term does not involve ``M``, so the network weights
    only see the data-fit term.
``"hutchinson"``
    ``-1/2 tr(K~^-1 dK~)`` estimated with Rademacher probes and batched CG,
    differentiating through ``M`` as well.  Unbiased for the gradient of the
    exact log-determinant, but not the derivative of the scaled-eigenvalue
    value.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
import scipy.linalg

from .errors import CapacityError, ContractError, GridRangeError, NumericalError
from .interp import GridSpec, SparseInterp, interp_gradient, interp_rows, spmv, spmv_t
from .kernels import (
    KernelParams,
    RbfParams,
    SmParams,
    full_stencil,
    kernel_grad,
    kernel_matrix,
    stencil,
    stencil_grad,
    zero_lag,
)
from .linalg import (
    BttbSpec,
    CgConfig,
    CgStats,
    SymToeplitz,
    bttb_mvm,
    cg_solve,
    kron_mvm,
    offset_correlation,
    sym_eig,
)
from .nn import MlpParams, mlp_backward, mlp_forward

LOG_2PI = float(np.log(2.0 * np.pi))
KRON, BTTB = "kron", "bttb"


@dataclass
class MllReport:
    value: float
    fit_term: float
    complexity_term: float
    constant: float
    cg_stats: Optional[CgStats] = None

    def __post_init__(self):
        total = self.fit_term + self.complexity_term + self.constant
        if abs(total - self.value) > 1e-12 * max(1.0, abs(self.value)):
            raise NumericalError("MllReport terms do not add up to the value")


@dataclass
class Prediction:
    """``variance`` is the latent f* variance; add ``noise`` for observations."""

    mean: np.ndarray
    variance: Optional[np.ndarray] = None
    noise: float = 0.0
    clamped: int = 0

    @property
    def observed_variance(self) -> np.ndarray:
        return self.variance + self.noise


def _transform(mlp: Optional[MlpParams], X: np.ndarray):
    if mlp is None:
        return X, None
    return mlp_forward(mlp, X)


def _report(fit: float, logdet: float, n: int, stats=None) -> MllReport:
    complexity = -0.5 * logdet
    const = -0.5 * n * LOG_2PI
    return MllReport(fit + complexity + const, fit, complexity, const, stats)


# --------------------------------------------------------------------------
# exact GP


@dataclass
class ExactGpModel:
    """Dense O(n^3) GP on (optionally transformed) inputs."""

    base: KernelParams
    log_noise: float
    X: np.ndarray
    mlp: Optional[MlpParams] = None
    cap: int = 2000

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.X.shape[0] > self.cap:
            raise CapacityError(f"exact GP limited to n <= {self.cap}, got {self.X.shape[0]}")

    @property
    def noise_var(self) -> float:
        return float(np.exp(2.0 * self.log_noise))

    def features(self, X=None) -> np.ndarray:
        return _transform(self.mlp, self.X if X is None else np.atleast_2d(np.asarray(X, dtype=np.float64)))[0]


def _jittered_cholesky(A: np.ndarray):
    """Cholesky with a jitter ladder: 1e-10 * mean diagonal, x10 up to 1e-4."""
    try:
        return scipy.linalg.cho_factor(A, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = max(np.trace(A) / A.shape[0], 1e-300)
    rel = 1e-10
    while rel <= 1e-4 * (1 + 1e-9):
        try:
            jitter = rel * scale
            return scipy.linalg.cho_factor(A + jitter * np.eye(A.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise NumericalError("covariance is not positive definite even with jitter 1e-4 * mean diagonal")


def _exact_factor(model: ExactGpModel):
    Z = model.features()
    K = kernel_matrix(Z, Z, model.base)
    A = K + model.noise_var * np.eye(Z.shape[0])
    if not np.all(np.isfinite(A)):
        raise NumericalError("exact covariance has non-finite entries")
    cf, _ = _jittered_cholesky(A)
    return Z, K, cf


def exact_mll(model: ExactGpModel, y) -> MllReport:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.X.shape[0],):
        raise ContractError("y length does not match the training inputs")
    _, _, cf = _exact_factor(model)
    alpha = scipy.linalg.cho_solve(cf, y)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return _report(-0.5 * float(y @ alpha), logdet, y.size)


def exact_mll_grads(model: ExactGpModel, y):
    """Gradient of :func:`exact_mll` with respect to (theta, log_noise).

    Network weights, if any, are held fixed.
    """
    y = np.asarray(y, dtype=np.float64)
    Z, _, cf = _exact_factor(model)
    n = Z.shape[0]
    alpha = scipy.linalg.cho_solve(cf, y)
    W = np.outer(alpha, alpha) - scipy.linalg.cho_solve(cf, np.eye(n))  # dL/dK = W / 2
    d_theta = np.zeros(model.base.n_params)
    block = max(1, 2_000_000 // (n * max(model.base.n_params, 1)))
    for s in range(0, n, block):
        g = kernel_grad(Z[s : s + block, None, :] - Z[None, :, :], model.base).d_theta
        d_theta += 0.5 * np.einsum("ij,ijp->p", W[s : s + block], g)
    d_noise = 0.5 * np.trace(W) * 2.0 * model.noise_var
    return d_theta, float(d_noise)


def exact_predict(model: ExactGpModel, y, Xstar) -> Prediction:
    y = np.asarray(y, dtype=np.float64)
    Z, _, cf = _exact_factor(model)
    Zs = model.features(Xstar)
    Ks = kernel_matrix(Zs, Z, model.base)
    mean = Ks @ scipy.linalg.cho_solve(cf, y)
    V = scipy.linalg.cho_solve(cf, Ks.T)
    var = zero_lag(model.base) - np.sum(Ks * V.T, axis=1)
    clamped = int(np.sum(var < 0))
    return Prediction(mean, np.maximum(var, 0.0), model.noise_var, clamped)


# --------------------------------------------------------------------------
# KISS-GP model


def _rbf_axis_grads(p: RbfParams, grid: GridSpec):
    """Per parameter, per axis: derivative of that axis' Toeplitz first column (None if zero)."""
    inv_l2 = np.exp(-2.0 * p.log_lengthscale)
    d_ell, d_scale = [], []
    for axis, (c, h) in enumerate(zip(grid.counts, grid.spacing)):
        r2 = (np.arange(c) * h) ** 2
        col = np.exp(-0.5 * r2 * inv_l2)
        if axis == 0:
            col = col * np.exp(2.0 * p.log_outputscale)
        d_ell.append(col * r2 * inv_l2)
        d_scale.append(2.0 * col if axis == 0 else None)
    return [d_ell, d_scale]


@dataclass
class _Caches:
    version: int
    Z: np.ndarray
    fwd: object
    rows: SparseInterp
    kuu: Union[List[SymToeplitz], BttbSpec]
    eig: Optional[tuple] = None
    alpha_key: Optional[tuple] = None
    alpha: Optional[np.ndarray] = None
    alpha_stats: Optional[CgStats] = None


@dataclass(eq=False)
class KissGpModel:
    """Deep-kernel GP with a structured interpolated covariance.

    Parameters are mutated through :meth:`update`, which marks derived
    state stale; :meth:`refresh` rebuilds it.  Every KISS operation refuses
    to run on stale state.
    """

    base: KernelParams
    log_noise: float
    grid: GridSpec
    X: np.ndarray
    mlp: Optional[MlpParams] = None
    strategy: Optional[str] = None
    cg: CgConfig = field(default_factory=CgConfig)
    eig_cap: int = 4096

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.strategy is None:
            self.strategy = KRON if isinstance(self.base, RbfParams) else BTTB
        if self.strategy not in (KRON, BTTB):
            raise ContractError(f"unknown K_UU strategy {self.strategy!r}")
        self._version = 0
        self._caches: Optional[_Caches] = None
        self._warm: Optional[np.ndarray] = None
        self._predictor = None
        self._check_params()

    def _check_params(self):
        if self.strategy == KRON and not isinstance(self.base, RbfParams):
            raise ContractError("the Kronecker strategy needs a product kernel (RBF)")
        d = self.X.shape[1] if self.mlp is None else self.mlp.arch.d_out
        if self.mlp is not None and self.mlp.arch.d_in != self.X.shape[1]:
            raise ContractError("network input width does not match the data")
        if d != self.grid.dim:
            raise ContractError(f"features have {d} dimensions, grid has {self.grid.dim}")
        if isinstance(self.base, SmParams) and self.base.D != d:
            raise ContractError("spectral mixture dimension does not match the features")
        if not np.isfinite(self.log_noise):
            raise ContractError("log_noise must be finite")

    # -- state -------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.grid.m

    @property
    def noise_var(self) -> float:
        return float(np.exp(2.0 * self.log_noise))

    @property
    def fresh(self) -> bool:
        return self._caches is not None and self._caches.version == self._version

    def update(self, *, base=None, log_noise=None, mlp=None, grid=None, X=None) -> "KissGpModel":
        if base is not None:
            self.base = base
        if log_noise is not None:
            self.log_noise = float(log_noise)
        if mlp is not None:
            self.mlp = mlp
        if grid is not None:
            self.grid = grid
        if X is not None:
            self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
            self._warm = None
        self._check_params()
        self._version += 1
        self._predictor = None
        return self

    def features(self, X=None) -> np.ndarray:
        return _transform(self.mlp, self.X if X is None else np.atleast_2d(np.asarray(X, dtype=np.float64)))[0]

    def refresh(self) -> "KissGpModel":
        """Rebuild features, interpolation rows and the lattice stencil.

        Raises GridRangeError if a training feature left the lattice; the
        caller decides whether to rebuild the grid.
        """
        if self.fresh:
            return self
        Z, fwd = _transform(self.mlp, self.X)
        rows = interp_rows(Z, self.grid, with_derivs=True)
        kuu = stencil(self.base, self.grid) if self.strategy == KRON else full_stencil(self.base, self.grid)
        self._caches = _Caches(self._version, Z, fwd, rows, kuu)
        return self

    def _fresh(self) -> _Caches:
        if not self.fresh:
            raise ContractError("model caches are stale; call refresh() after changing parameters")
        return self._caches

    # -- flat parameter vector (w, theta, log_noise) -----------------------

    def param_vector(self) -> np.ndarray:
        parts = [] if self.mlp is None else [self.mlp.flatten()]
        return np.concatenate(parts + [self.base.to_vector(), [self.log_noise]])

    def set_param_vector(self, vec) -> "KissGpModel":
        vec = np.asarray(vec, dtype=np.float64)
        nw = 0 if self.mlp is None else self.mlp.size
        nt = self.base.n_params
        if vec.shape != (nw + nt + 1,):
            raise ContractError(f"parameter vector length {vec.size} != {nw + nt + 1}")
        return self.update(
            mlp=None if self.mlp is None else self.mlp.unflatten(vec[:nw]),
            base=self.base.with_vector(vec[nw : nw + nt]),
            log_noise=float(vec[-1]),
        )


# --------------------------------------------------------------------------
# structured products


def _kuu_mvm(c: _Caches, v: np.ndarray) -> np.ndarray:
    if isinstance(c.kuu, BttbSpec):
        return bttb_mvm(c.kuu, v)
    return kron_mvm(c.kuu, v)


def kiss_mvm(model: KissGpModel, v) -> np.ndarray:
    """``(M K_UU M^T + sigma^2 I) v`` for ``v`` of shape (n,) or (n, k)."""
    c = model._fresh()
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != model.n:
        raise ContractError(f"kiss_mvm: vector length {v.shape[0]} != n = {model.n}")
    return spmv(c.rows, _kuu_mvm(c, spmv_t(c.rows, v))) + model.noise_var * v


def kiss_diag(model: KissGpModel) -> np.ndarray:
    """Diagonal of ``M K_UU M^T + sigma^2 I`` (for Jacobi preconditioning)."""
    c = model._fresh()
    gen = c.kuu.gen if isinstance(c.kuu, BttbSpec) else full_stencil(model.base, model.grid).gen
    counts = model.grid.counts
    sub = np.stack(np.unravel_index(c.rows.idx, counts), axis=-1)  # (n, K, d)
    off = sub[:, :, None, :] - sub[:, None, :, :] + (np.array(counts) - 1)
    kk = gen[tuple(np.moveaxis(off, -1, 0))]
    return np.einsum("na,nab,nb->n", c.rows.w, kk, c.rows.w) + model.noise_var


def _solve(model: KissGpModel, B: np.ndarray, x0=None):
    diag = kiss_diag(model) if model.cg.preconditioner == "diagonal" else None
    return cg_solve(lambda v: kiss_mvm(model, v), B, model.cg, x0=x0, diag=diag)


def _alpha(model: KissGpModel, y: np.ndarray):
    c = model._fresh()
    key = (c.version, hashlib.sha1(np.ascontiguousarray(y).tobytes()).hexdigest())
    if c.alpha_key == key:
        return c.alpha, c.alpha_stats
    x0 = model._warm if model._warm is not None and model._warm.shape == y.shape else None
    alpha, stats = _solve(model, y, x0)
    c.alpha_key, c.alpha, c.alpha_stats = key, alpha, stats
    model._warm = alpha
    return alpha, stats


# --------------------------------------------------------------------------
# scaled-eigenvalue log-determinant
#
# The n/m scaling assumes the n points fill the lattice at uniform density.
# The padding that keeps moving features interpolable breaks that, so the
# spectrum is taken over the node block covering the data box recorded when
# the grid was built (GridSpec.core_window).  The block is fixed per grid.


def _core_crop(grid: GridSpec):
    """Core block sizes and the stencil slices that restrict K_UU to it."""
    counts = tuple(c for _, c in grid.core_window())
    crop = tuple(slice(m - c, m + c - 1) for m, c in zip(grid.counts, counts))
    return counts, crop


def _eig(model: KissGpModel):
    """Eigen-decomposition of the core block of K_UU in its native layout (cached)."""
    c = model._fresh()
    if c.eig is not None:
        return c.eig
    counts, crop = _core_crop(model.grid)
    if isinstance(c.kuu, BttbSpec):
        mc = int(np.prod(counts))
        if mc > model.eig_cap:
            raise CapacityError(
                f"dense eigendecomposition of a {mc}-node lattice block exceeds the cap of {model.eig_cap}; "
                "reduce nodes per axis or use an RBF base kernel"
            )
        core = BttbSpec(counts, c.kuu.gen[crop])
        c.eig = ("bttb",) + tuple(sym_eig(core.dense()))
    else:
        if max(counts) > model.eig_cap:
            raise CapacityError(f"per-axis lattice size exceeds the eigendecomposition cap of {model.eig_cap}")
        axes = [sym_eig(SymToeplitz(t.first_column[:k]).dense()) for t, k in zip(c.kuu, counts)]
        lam = np.ones(1)
        for w, _ in axes:
            lam = np.multiply.outer(lam, w).ravel()
        c.eig = ("kron", lam, axes)
    return c.eig


def _selection(lam: np.ndarray, n: int) -> np.ndarray:
    """Weight in [0, 1] of each eigenvalue in the log-det sum.

    All of them when m <= n; otherwise the n largest, with a tie group
    straddling the cut sharing the remaining slots equally.
    """
    m = lam.size
    if m <= n:
        return np.ones(m)
    order = np.argsort(-lam, kind="stable")
    cut = lam[order[n - 1]]
    tol = 1e-12 * max(np.abs(lam).max(), 1e-300)
    tied = np.abs(lam - cut) <= tol
    above = lam > cut + tol
    sel = above.astype(np.float64)
    slots = n - int(above.sum())
    sel[tied] = slots / tied.sum()
    return sel


def _logdet_parts(model: KissGpModel):
    eig = _eig(model)
    lam_raw = eig[1]
    lam = np.maximum(lam_raw, 0.0)
    n = model.n
    s = n / lam.size
    sel = _selection(lam, n)
    s2 = model.noise_var
    logdet = float(np.sum(sel * np.log(s * lam + s2)) + (n - sel.sum()) * np.log(s2))
    # d logdet / d lambda_k, zero for clamped eigenvalues
    dlam = np.where(lam_raw > 0, sel * s / (s * lam + s2), 0.0)
    return logdet, dlam, sel, lam, s


def kiss_logdet(model: KissGpModel) -> float:
    """Scaled-eigenvalue estimate of ``log|M K_UU M^T + sigma^2 I|``."""
    return _logdet_parts(model)[0]


def kiss_mll(model: KissGpModel, y) -> MllReport:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.n,):
        raise ContractError("y length does not match the training inputs")
    alpha, stats = _alpha(model, y)
    return _report(-0.5 * float(y @ alpha), kiss_logdet(model), model.n, stats)


# --------------------------------------------------------------------------
# gradients


@dataclass
class MllGrads:
    d_theta: np.ndarray
    d_log_noise: float
    d_w: Optional[MlpParams]
    report: MllReport

    def vector(self) -> np.ndarray:
        """Flat gradient in the order of ``KissGpModel.param_vector``."""
        parts = [] if self.d_w is None else [self.d_w.flatten()]
        return np.concatenate(parts + [self.d_theta, [self.d_log_noise]])


def _kron_theta_bilinear(model, c, x, y) -> np.ndarray:
    """``sum_cols x^T (dK_UU/dtheta_p) y`` for each RBF parameter (Kronecker layout)."""
    out = np.zeros(model.base.n_params)
    for p, dcols in enumerate(_rbf_axis_grads(model.base, model.grid)):
        for axis, dc in enumerate(dcols):
            if dc is None:
                continue
            fac = list(c.kuu)
            fac[axis] = SymToeplitz(dc)
            out[p] += float(np.sum(x * kron_mvm(fac, y)))
    return out


def _bttb_theta_bilinear(model, x, y) -> np.ndarray:
    C = offset_correlation(x, y, model.grid.counts)
    G = stencil_grad(model.base, model.grid)
    return np.tensordot(G, C, axes=C.ndim)


def _theta_bilinear(model, c, x, y) -> np.ndarray:
    if model.strategy == KRON:
        return _kron_theta_bilinear(model, c, x, y)
    return _bttb_theta_bilinear(model, x, y)


def _complexity_theta_grad(model, c, dlam) -> np.ndarray:
    """``d logdet / d theta`` through the eigenvalues of the core block."""
    eig = _eig(model)
    counts, crop = _core_crop(model.grid)
    if eig[0] == "kron":
        axes = eig[2]
        out = np.zeros(model.base.n_params)
        for p, dcols in enumerate(_rbf_axis_grads(model.base, model.grid)):
            dl = np.zeros(dlam.size)
            for axis, dc in enumerate(dcols):
                if dc is None:
                    continue
                dT = SymToeplitz(dc[: counts[axis]]).dense()
                acc = np.ones(1)
                for a, (w, Q) in enumerate(axes):
                    # d lambda_j = q_j^T dT q_j on the differentiated axis
                    part = np.einsum("ij,ij->j", Q, dT @ Q) if a == axis else w
                    acc = np.multiply.outer(acc, part).ravel()
                dl += acc
            out[p] = float(dlam @ dl)
        return out
    Q = eig[2]
    keep = np.flatnonzero(dlam)
    D = np.zeros(tuple(2 * k - 1 for k in counts))
    chunk = max(1, (1 << 22) // max(Q.shape[0], 1))
    for s in range(0, keep.size, chunk):
        cols = keep[s : s + chunk]
        D += offset_correlation(Q[:, cols] * dlam[cols], Q[:, cols], counts)
    G = stencil_grad(model.base, model.grid)[(slice(None),) + crop]
    return np.tensordot(G, D, axes=D.ndim)


def _probes(n: int, count, seed: int):
    if isinstance(count, str):
        if count != "basis":
            raise ContractError(f"unknown probe set {count!r}")
        return np.eye(n), 1.0
    if count < 1:
        raise ContractError("probe count must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.choice([-1.0, 1.0], size=(n, int(count))), 1.0 / count


GRAD_MODES = ("scaled_eig", "hutchinson", "hybrid")


def _probe_dz(c, U, Zp, Mu=None, Mz=None):
    """Per-point sum over probes of u^T (dK/dz) z, by the product rule over M."""
    Mu = spmv_t(c.rows, U) if Mu is None else Mu
    Mz = spmv_t(c.rows, Zp) if Mz is None else Mz
    gz = interp_gradient(c.rows, _kuu_mvm(c, Mz))  # (n, d, r)
    gu = interp_gradient(c.rows, _kuu_mvm(c, Mu))
    return np.einsum("nr,ndr->nd", U, gz) + np.einsum("nr,ndr->nd", Zp, gu)


def kiss_mll_grads(
    model: KissGpModel,
    y,
    mode: str = "scaled_eig",
    freeze_interp: bool = False,
    probes: Union[int, str] = 10,
    probe_seed: int = 0,
) -> MllGrads:
    """Gradient of the KISS log marginal likelihood for (w, theta, log_noise).

    ``freeze_interp`` treats ``M`` as constant (the w-gradient is then
    zero).  In ``"hutchinson"`` mode ``probes`` is a count of Rademacher
    vectors drawn from ``probe_seed``, or ``"basis"`` for the exact trace
    over unit vectors.

    ``"hybrid"`` takes theta and noise from the scaled-eigenvalue objective
    and adds the probed log-det term along the M path to the w-gradient,
    which the scaled-eigenvalue value cannot see.
    """
    if mode not in GRAD_MODES:
        raise ContractError(f"unknown gradient mode {mode!r}")
    y = np.asarray(y, dtype=np.float64)
    report = kiss_mll(model, y)
    c = model._fresh()
    alpha, _ = _alpha(model, y)
    s2 = model.noise_var
    a = spmv_t(c.rows, alpha)

    # data fit: 1/2 alpha^T dK alpha
    d_theta = 0.5 * _theta_bilinear(model, c, a, a)
    d_noise = s2 * float(alpha @ alpha)
    dZ = None
    if model.mlp is not None and not freeze_interp:
        v = _kuu_mvm(c, a)
        dZ = alpha[:, None] * interp_gradient(c.rows, v)

    if mode in ("scaled_eig", "hybrid"):
        _, dlam, sel, lam, s = _logdet_parts(model)
        d_theta -= 0.5 * _complexity_theta_grad(model, c, dlam)
        d_noise -= 0.5 * (float(np.sum(sel * 2.0 * s2 / (s * lam + s2))) + 2.0 * (model.n - sel.sum()))
    if mode == "hybrid" and dZ is not None:
        Zp, weight = _probes(model.n, probes, probe_seed)
        U, stats = _solve(model, Zp)
        if not stats.converged:
            report.cg_stats = stats
        dZ -= 0.5 * weight * _probe_dz(c, U, Zp)
    elif mode == "hutchinson":
        Zp, weight = _probes(model.n, probes, probe_seed)
        U, stats = _solve(model, Zp)
        if not stats.converged:
            report.cg_stats = stats
        Mu, Mz = spmv_t(c.rows, U), spmv_t(c.rows, Zp)
        d_theta -= 0.5 * weight * _theta_bilinear(model, c, Mu, Mz)
        d_noise -= 0.5 * weight * 2.0 * s2 * float(np.sum(U * Zp))
        if dZ is not None:
            dZ -= 0.5 * weight * _probe_dz(c, U, Zp, Mu, Mz)

    d_w = None
    if model.mlp is not None:
        if dZ is None:
            d_w = model.mlp.unflatten(np.zeros(model.mlp.size))
        else:
            d_w, _ = mlp_backward(model.mlp, c.fwd, dZ)
    return MllGrads(d_theta, float(d_noise), d_w, report)


# --------------------------------------------------------------------------
# prediction


@dataclass
class _Predictor:
    version: int
    alpha: np.ndarray
    v_pred: np.ndarray
    stats: CgStats


def precompute_predictor(model: KissGpModel, y) -> None:
    """Cache ``v_pred = K_UU M^T alpha`` so a mean costs one sparse row."""
    y = np.asarray(y, dtype=np.float64)
    model.refresh()
    alpha, stats = _alpha(model, y)
    if not stats.converged:
        raise NumericalError(
            f"CG did not reach tol {model.cg.tol:g} (residual {stats.final_rel_residual:.3g}) while caching the predictor"
        )
    c = model._caches
    model._predictor = _Predictor(c.version, alpha, _kuu_mvm(c, spmv_t(c.rows, alpha)), stats)


def _test_rows(model: KissGpModel, Xstar, with_derivs=False) -> SparseInterp:
    Zs = model.features(Xstar)
    try:
        return interp_rows(Zs, model.grid, with_derivs)
    except GridRangeError as e:
        raise GridRangeError(
            f"{e}. Test features must lie inside the training lattice; retrain with more padding "
            "or restrict test inputs to the training range",
            axis=e.axis,
        ) from None


def predict(model: KissGpModel, Xstar, want_variance: bool = False, batch: int = 256) -> Prediction:
    """Predictive mean (and optionally latent variance) at ``Xstar``.

    Variance uses ``m*^T K_UU m* - b^T (K~)^-1 b`` with ``b = M K_UU m*``:
    one CG solve per test point, batched.
    """
    pred = model._predictor
    if pred is None or pred.version != model._version:
        raise ContractError("predictor is missing or stale; call precompute_predictor first")
    rows = _test_rows(model, Xstar)
    mean = spmv(rows, pred.v_pred)
    if not want_variance:
        return Prediction(mean, None, model.noise_var)
    c = model._fresh()
    ns = rows.n
    var = np.empty(ns)
    for s in range(0, ns, batch):
        Ms = rows.matrix[s : s + batch].T.toarray()  # (m, b)
        KMs = _kuu_mvm(c, Ms)
        prior = np.sum(Ms * KMs, axis=0)
        B = spmv(c.rows, KMs)
        sol, _ = _solve(model, B)
        var[s : s + batch] = prior - np.sum(B * sol, axis=0)
    clamped = int(np.sum(var < 0))
    return Prediction(mean, np.maximum(var, 0.0), model.noise_var, clamped)
