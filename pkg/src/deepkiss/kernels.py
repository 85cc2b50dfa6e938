"""Stationary base kernels: squared-exponential (RBF) and spectral mixture.

Every kernel is a function of the lag ``tau = x - x'`` (shape ``(..., D)``).
Positive parameters live in log space so the optimizer works unconstrained.
The flat parameter order used by ``to_vector``/``with_vector`` is also the
order of ``KernelGrad.d_theta``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Union

import numpy as np

from .errors import ContractError
from .linalg import BttbSpec, SymToeplitz

TWO_PI = 2.0 * np.pi


@dataclass
class RbfParams:
    """``k(tau) = s^2 exp(-|tau|^2 / (2 l^2))``."""

    log_lengthscale: float = 0.0
    log_outputscale: float = 0.0

    kind = "rbf"

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def outputscale(self) -> float:
        return float(np.exp(self.log_outputscale))

    @property
    def n_params(self) -> int:
        return 2

    def param_names(self) -> List[str]:
        return ["log_lengthscale", "log_outputscale"]

    def to_vector(self) -> np.ndarray:
        return np.array([self.log_lengthscale, self.log_outputscale], dtype=np.float64)

    def with_vector(self, vec) -> "RbfParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (2,):
            raise ContractError("RbfParams vector must have length 2")
        return RbfParams(float(vec[0]), float(vec[1]))

    def to_dict(self) -> dict:
        return {"kind": "rbf", "log_lengthscale": self.log_lengthscale, "log_outputscale": self.log_outputscale}


@dataclass
class SmParams:
    """Spectral mixture with diagonal bandwidth matrices.

    ``log_bandwidths[q, d]`` is the log of the d-th diagonal entry of
    Sigma_q (an inverse squared length-scale); ``frequencies`` are in cycles
    per unit input.
    """

    log_weights: np.ndarray
    log_bandwidths: np.ndarray
    frequencies: np.ndarray

    kind = "sm"

    def __post_init__(self):
        self.log_weights = np.atleast_1d(np.asarray(self.log_weights, dtype=np.float64))
        self.log_bandwidths = np.atleast_2d(np.asarray(self.log_bandwidths, dtype=np.float64))
        self.frequencies = np.atleast_2d(np.asarray(self.frequencies, dtype=np.float64))
        Q = self.log_weights.shape[0]
        if Q < 1:
            raise ContractError("spectral mixture needs Q >= 1")
        if self.log_bandwidths.shape != self.frequencies.shape or self.log_bandwidths.shape[0] != Q:
            raise ContractError("log_bandwidths and frequencies must both be (Q, D)")

    @property
    def Q(self) -> int:
        return self.log_weights.shape[0]

    @property
    def D(self) -> int:
        return self.log_bandwidths.shape[1]

    @property
    def n_params(self) -> int:
        return self.Q * (1 + 2 * self.D)

    def param_names(self) -> List[str]:
        names = [f"log_weights[{q}]" for q in range(self.Q)]
        names += [f"log_bandwidths[{q},{d}]" for q in range(self.Q) for d in range(self.D)]
        names += [f"frequencies[{q},{d}]" for q in range(self.Q) for d in range(self.D)]
        return names

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_weights, self.log_bandwidths.ravel(), self.frequencies.ravel()])

    def with_vector(self, vec) -> "SmParams":
        vec = np.asarray(vec, dtype=np.float64)
        Q, D = self.Q, self.D
        if vec.shape != (self.n_params,):
            raise ContractError(f"SmParams vector must have length {self.n_params}")
        return SmParams(vec[:Q].copy(), vec[Q : Q + Q * D].reshape(Q, D).copy(), vec[Q + Q * D :].reshape(Q, D).copy())

    def scales(self) -> np.ndarray:
        """Per-component zero-lag value ``a_q |Sigma_q|^(1/2) (2 pi)^(-D/2)``."""
        return np.exp(self.log_weights + 0.5 * self.log_bandwidths.sum(axis=1) - 0.5 * self.D * np.log(TWO_PI))

    def to_dict(self) -> dict:
        return {
            "kind": "sm",
            "log_weights": self.log_weights.tolist(),
            "log_bandwidths": self.log_bandwidths.tolist(),
            "frequencies": self.frequencies.tolist(),
        }


KernelParams = Union[RbfParams, SmParams]


def params_from_dict(d: dict) -> KernelParams:
    kind = d.get("kind")
    if kind == "rbf":
        return RbfParams(float(d["log_lengthscale"]), float(d["log_outputscale"]))
    if kind == "sm":
        return SmParams(np.array(d["log_weights"]), np.array(d["log_bandwidths"]), np.array(d["frequencies"]))
    raise ContractError(f"unknown kernel kind {kind!r}")


@dataclass
class KernelGrad:
    d_theta: np.ndarray  # (..., n_params)
    d_tau: np.ndarray  # (..., D)


def _lags(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 0:
        tau = tau[None]
    return tau


def rbf_eval(tau, p: RbfParams) -> np.ndarray:
    tau = _lags(tau)
    r2 = np.sum(tau**2, axis=-1)
    return np.exp(2.0 * p.log_outputscale - 0.5 * r2 * np.exp(-2.0 * p.log_lengthscale))


def rbf_grad(tau, p: RbfParams) -> KernelGrad:
    tau = _lags(tau)
    inv_l2 = np.exp(-2.0 * p.log_lengthscale)
    k = rbf_eval(tau, p)
    r2 = np.sum(tau**2, axis=-1)
    d_theta = np.stack([k * r2 * inv_l2, 2.0 * k], axis=-1)
    d_tau = -(k * inv_l2)[..., None] * tau
    return KernelGrad(d_theta, d_tau)


def _sm_terms(tau, p: SmParams):
    tau = _lags(tau)
    if tau.shape[-1] != p.D:
        raise ContractError(f"lag dimension {tau.shape[-1]} != kernel dimension {p.D}")
    bw = np.exp(p.log_bandwidths)  # (Q, D)
    quad = np.einsum("...d,qd->...q", tau**2, bw)
    phase = TWO_PI * np.einsum("...d,qd->...q", tau, p.frequencies)
    env = p.scales() * np.exp(-0.5 * quad)  # (..., Q)
    return tau, bw, env, phase


def sm_eval(tau, p: SmParams) -> np.ndarray:
    _, _, env, phase = _sm_terms(tau, p)
    return np.sum(env * np.cos(phase), axis=-1)


def sm_grad(tau, p: SmParams) -> KernelGrad:
    tau, bw, env, phase = _sm_terms(tau, p)
    c, s = np.cos(phase), np.sin(phase)
    term = env * c  # (..., Q)
    d_logw = term
    # d/dlog b_qd: term * (1/2 - b_qd tau_d^2 / 2)
    d_logb = term[..., :, None] * (0.5 - 0.5 * bw * tau[..., None, :] ** 2)
    d_mu = -(env * s)[..., :, None] * TWO_PI * tau[..., None, :]
    lead = tau.shape[:-1]
    d_theta = np.concatenate(
        [d_logw, d_logb.reshape(lead + (-1,)), d_mu.reshape(lead + (-1,))], axis=-1
    )
    d_tau = -np.einsum("...q,qd,...d->...d", term, bw, tau) - TWO_PI * np.einsum("...q,qd->...d", env * s, p.frequencies)
    return KernelGrad(d_theta, d_tau)


def kernel_eval(tau, p: KernelParams) -> np.ndarray:
    if isinstance(p, RbfParams):
        return rbf_eval(tau, p)
    return sm_eval(tau, p)


def kernel_grad(tau, p: KernelParams) -> KernelGrad:
    if isinstance(p, RbfParams):
        return rbf_grad(tau, p)
    return sm_grad(tau, p)


def zero_lag(p: KernelParams) -> float:
    """``k(0)``, the prior variance."""
    if isinstance(p, RbfParams):
        return float(np.exp(2.0 * p.log_outputscale))
    return float(p.scales().sum())


def kernel_matrix(X1, X2, p: KernelParams) -> np.ndarray:
    """Dense ``K[i, j] = k(X1[i] - X2[j])``."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=np.float64))
    X2 = np.atleast_2d(np.asarray(X2, dtype=np.float64))
    return kernel_eval(X1[:, None, :] - X2[None, :, :], p)


# --------------------------------------------------------------------------
# lattice stencils


def _offset_lags(grid) -> np.ndarray:
    axes = [np.arange(-(c - 1), c) * h for c, h in zip(grid.counts, grid.spacing)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


def stencil(p: KernelParams, grid) -> Union[List[SymToeplitz], BttbSpec]:
    """Kernel values over every lattice offset.

    RBF factors over axes, so it comes back as one Toeplitz factor per axis
    (the amplitude rides on the first); any other kernel returns a full
    BTTB stencil.
    """
    if isinstance(p, RbfParams):
        factors = []
        inv_l2 = np.exp(-2.0 * p.log_lengthscale)
        for axis, (c, h) in enumerate(zip(grid.counts, grid.spacing)):
            col = np.exp(-0.5 * (np.arange(c) * h) ** 2 * inv_l2)
            if axis == 0:
                col = col * np.exp(2.0 * p.log_outputscale)
            factors.append(SymToeplitz(col))
        return factors
    return full_stencil(p, grid)


def full_stencil(p: KernelParams, grid) -> BttbSpec:
    return BttbSpec(tuple(grid.counts), kernel_eval(_offset_lags(grid), p))


def stencil_grad(p: KernelParams, grid) -> np.ndarray:
    """``d gen / d theta``: shape ``(n_params,) + stencil shape``."""
    g = kernel_grad(_offset_lags(grid), p).d_theta
    return np.moveaxis(g, -1, 0)
