"""Fully-connected ReLU network g(x, w) with hand-written backprop, plus Adam."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, NumericalError

MAX_OUTPUT_DIM = 5


@dataclass(frozen=True)
class MlpArch:
    """Layer widths ``[D, h_1, ..., h_L, d_out]``; ReLU on hidden layers, linear output.

    ``d_out`` is capped at 5 because the inducing lattice grows
    exponentially in it.
    """

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ContractError("MlpArch needs an input, at least one hidden layer and an output")
        if min(sizes) < 1:
            raise ContractError(f"layer widths must be positive, got {sizes}")
        if sizes[-1] > MAX_OUTPUT_DIM:
            raise ContractError(f"output dimension {sizes[-1]} exceeds {MAX_OUTPUT_DIM}; the lattice would not fit")

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass
class MlpParams:
    """``weights[l]`` has shape (out, in); ``biases[l]`` has shape (out,)."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("MlpParams: need matching, non-empty weight and bias lists")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ContractError(f"MlpParams layer {l}: weight {W.shape} and bias {b.shape} disagree")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ContractError(f"MlpParams layer {l}: input width {W.shape[1]} != previous output")

    @property
    def arch(self) -> MlpArch:
        return MlpArch((self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights))

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    def unflatten(self, vec) -> "MlpParams":
        """New params with this object's shapes filled from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ContractError(f"flat vector has length {vec.size}, expected {self.size}")
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(vec[k : k + W.size].reshape(W.shape).copy())
            k += W.size
            bs.append(vec[k : k + b.size].copy())
            k += b.size
        return MlpParams(Ws, bs)

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.arch.layer_sizes),
            "layers": [
                {"weight": W.tolist(), "weight_shape": list(W.shape), "bias": b.tolist()}
                for W, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        Ws, bs = [], []
        for layer in d["layers"]:
            Ws.append(np.array(layer["weight"], dtype=np.float64).reshape(layer["weight_shape"]))
            bs.append(np.array(layer["bias"], dtype=np.float64))
        p = cls(Ws, bs)
        if list(p.arch.layer_sizes) != list(d["layer_sizes"]):
            raise ContractError("stored layer sizes disagree with stored weights")
        return p


def mlp_init(arch: MlpArch, seed: int) -> MlpParams:
    """He-normal weights (std sqrt(2/fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    sizes = arch.layer_sizes
    Ws = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)) for fan_in, fan_out in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(s) for s in sizes[1:]]
    return MlpParams(Ws, bs)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]  # input to each layer (post-activation of the previous one)
    pre: List[np.ndarray]  # pre-activations of hidden layers


def mlp_forward(p: MlpParams, X) -> Tuple[np.ndarray, ForwardCache]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != p.weights[0].shape[1]:
        raise ContractError(f"input has {X.shape[1]} columns, network expects {p.weights[0].shape[1]}")
    inputs, pre = [], []
    h = X
    last = len(p.weights) - 1
    for l, (W, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        a = h @ W.T + b
        if l < last:
            pre.append(a)
            h = np.maximum(a, 0.0)
        else:
            h = a
    if not np.all(np.isfinite(h)):
        raise NumericalError("network output contains non-finite values")
    return h, ForwardCache(inputs, pre)


def mlp_backward(p: MlpParams, cache: ForwardCache, dL_dZ) -> Tuple[MlpParams, np.ndarray]:
    """Reverse pass for ``L = sum_i <dL_dZ[i], g(x_i)>``; returns (dL/dw, dL/dX)."""
    G = np.atleast_2d(np.asarray(dL_dZ, dtype=np.float64))
    n = cache.inputs[0].shape[0]
    if G.shape != (n, p.weights[-1].shape[0]):
        raise ContractError(f"dL_dZ has shape {G.shape}, expected {(n, p.weights[-1].shape[0])}")
    L = len(p.weights)
    dWs: List[np.ndarray] = [None] * L
    dbs: List[np.ndarray] = [None] * L
    for l in range(L - 1, -1, -1):
        if l < L - 1:
            G = G * (cache.pre[l] > 0.0)  # ReLU'(0) = 0
        dWs[l] = G.T @ cache.inputs[l]
        dbs[l] = G.sum(axis=0)
        G = G @ p.weights[l]
    return MlpParams(dWs, dbs), G


@dataclass
class AdamState:
    """Adam moments for a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)


ParamLike = Union[np.ndarray, MlpParams]


def adam_step(params: ParamLike, grads: ParamLike, state: AdamState, maximize: bool = False):
    """One bias-corrected Adam step (descent unless ``maximize``).

    Accepts flat arrays or ``MlpParams`` and returns the same kind, along
    with the updated state (the input state is not modified).
    """
    as_mlp = isinstance(params, MlpParams)
    x = params.flatten() if as_mlp else np.asarray(params, dtype=np.float64)
    g = grads.flatten() if isinstance(grads, MlpParams) else np.asarray(grads, dtype=np.float64)
    if x.shape != g.shape or x.shape != state.m.shape:
        raise ContractError(f"adam_step: shapes {x.shape}, {g.shape}, {state.m.shape} disagree")
    if maximize:
        g = -g
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    x_new = x - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return (params.unflatten(x_new) if as_mlp else x_new), new_state
