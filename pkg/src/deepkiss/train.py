"""Two-phase training: squared-loss pre-training of the network, then joint
marginal-likelihood ascent over network weights, kernel and noise."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np
import scipy.optimize
from scipy.spatial import cKDTree

from .errors import ConfigError, ContractError, GridRangeError, NumericalError, TrainingError
from .gp import (
    BTTB,
    GRAD_MODES,
    KRON,
    ExactGpModel,
    KissGpModel,
    exact_mll,
    exact_mll_grads,
    kiss_mll,
    kiss_mll_grads,
    precompute_predictor,
)
from .interp import GridSpec, build_grid
from .kernels import RbfParams, SmParams
from .linalg import CgConfig
from .nn import AdamState, MlpArch, MlpParams, adam_step, mlp_backward, mlp_forward, mlp_init

REBUILD_POLICIES = ("fraction", "exit", "never")
BTTB_MAX_NODES = 4096


# --------------------------------------------------------------------------
# configuration


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-2
    decay_every: int = 20
    decay_factor: float = 0.5
    momentum: float = 0.9
    seed: int = 0


@dataclass
class JointConfig:
    iterations: int = 200
    learning_rate: float = 1e-3
    theta_learning_rate: float = 2e-2
    warmup_theta_steps: int = 30
    probe_count: int = 10
    gradient_mode: str = "scaled_eig"
    grid_rebuild_policy: str = "fraction"
    freeze_interp: bool = False
    cg_tol: float = 1e-10
    cg_max_iters: int = 1000
    seed: int = 0


@dataclass
class GridConfig:
    nodes_per_axis: object = "auto"
    padding: float = 0.25


@dataclass
class NetworkConfig:
    hidden: List[int] = field(default_factory=lambda: [32, 16])
    output_dim: int = 2


@dataclass
class TrainConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    base_kernel: str = "sm"
    q: int = 4
    grid: GridConfig = field(default_factory=GridConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    standardize: bool = True
    joint_enabled: bool = True
    init_candidates: int = 5

    def validate(self) -> "TrainConfig":
        p, j, g, n = self.pretrain, self.joint, self.grid, self.network
        checks = [
            ("pretrain.epochs", lambda: p.epochs >= 0),
            ("pretrain.batch_size", lambda: p.batch_size >= 1),
            ("pretrain.learning_rate", lambda: p.learning_rate > 0),
            ("pretrain.decay_every", lambda: p.decay_every >= 1),
            ("pretrain.decay_factor", lambda: 0 < p.decay_factor <= 1),
            ("pretrain.momentum", lambda: 0 <= p.momentum < 1),
            ("joint.iterations", lambda: j.iterations >= 0),
            ("joint.learning_rate", lambda: j.learning_rate > 0),
            ("joint.theta_learning_rate", lambda: j.theta_learning_rate > 0),
            ("joint.warmup_theta_steps", lambda: j.warmup_theta_steps >= 0),
            ("joint.probe_count", lambda: j.probe_count >= 1),
            ("joint.gradient_mode", lambda: j.gradient_mode in GRAD_MODES),
            ("joint.grid_rebuild_policy", lambda: j.grid_rebuild_policy in REBUILD_POLICIES),
            ("joint.cg_tol", lambda: j.cg_tol > 0),
            ("joint.cg_max_iters", lambda: j.cg_max_iters >= 1),
            ("base_kernel", lambda: self.base_kernel in ("rbf", "sm")),
            ("q", lambda: isinstance(self.q, int) and self.q >= 1),
            ("grid.nodes_per_axis", lambda: g.nodes_per_axis == "auto" or (isinstance(g.nodes_per_axis, int) and g.nodes_per_axis >= 4)),
            ("grid.padding", lambda: g.padding >= 0),
            ("network.hidden", lambda: len(n.hidden) >= 1 and all(isinstance(h, int) and h >= 1 for h in n.hidden)),
            ("network.output_dim", lambda: 1 <= n.output_dim <= 5),
            ("init_candidates", lambda: isinstance(self.init_candidates, int) and self.init_candidates >= 1),
        ]
        for key, check in checks:
            try:
                ok = bool(check())
            except TypeError:
                ok = False
            if not ok:
                raise ConfigError(f"invalid value for config key '{key}'", key=key)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        sections = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, val in d.items():
            if key not in sections:
                raise ConfigError(f"unknown config key '{key}'", key=key)
            sub_cls = {
                "pretrain": PretrainConfig,
                "joint": JointConfig,
                "grid": GridConfig,
                "network": NetworkConfig,
            }.get(key)
            if sub_cls is None:
                kwargs[key] = val
                continue
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{key}' must be a table", key=key)
            known = {f.name for f in fields(sub_cls)}
            for sub in val:
                if sub not in known:
                    raise ConfigError(f"unknown config key '{key}.{sub}'", key=f"{key}.{sub}")
            kwargs[key] = sub_cls(**val)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file is not valid JSON: {e}", key=None) from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object", key=None)
        return cls.from_dict(raw)


# --------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def x(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.x_mean) / self.x_std

    def y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def y_inverse(self, ys) -> np.ndarray:
        return np.asarray(ys) * self.y_std + self.y_mean

    def var_inverse(self, var) -> np.ndarray:
        return np.asarray(var) * self.y_std**2

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(), "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.array(d["x_mean"], dtype=np.float64), np.array(d["x_std"], dtype=np.float64), float(d["y_mean"]), float(d["y_std"]))

    @classmethod
    def identity(cls, D: int) -> "Standardizer":
        return cls(np.zeros(D), np.ones(D), 0.0, 1.0)


def standardize(X, y) -> Tuple[np.ndarray, np.ndarray, Standardizer]:
    """Z-score features and target.  Constant features are centred only."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 2 or y.shape != (X.shape[0],):
        raise ContractError("standardize needs n >= 2 rows and one target per row")
    y_std = float(y.std())
    if not y_std > 0:
        raise ContractError("target has zero variance")
    x_std = X.std(axis=0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    st = Standardizer(X.mean(axis=0), x_std, float(y.mean()), y_std)
    return st.x(X), st.y(y), st


# --------------------------------------------------------------------------
# pre-training


def pretrain_dnn(arch: MlpArch, X, y, cfg: PretrainConfig, init: Optional[MlpParams] = None) -> Tuple[MlpParams, List[float]]:
    """Mini-batch SGD (momentum, step decay) on squared loss through a linear head.

    Starts from ``init`` if given, else from a He initialization seeded by
    ``cfg.seed``.  Returns the trunk parameters and the per-epoch mean
    training loss; the head is discarded.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    seed = int(rng.integers(2**31))
    p = mlp_init(arch, seed) if init is None else init.copy()
    if p.arch.layer_sizes != arch.layer_sizes:
        raise ContractError("init parameters do not match the architecture")
    if cfg.epochs == 0:
        return p, []
    head_w = rng.normal(0.0, 1.0 / np.sqrt(arch.d_out), size=arch.d_out)
    head_b = 0.0
    vec = np.concatenate([p.flatten(), head_w, [head_b]])
    nw = p.size
    vel = np.zeros_like(vec)

    def unpack(v):
        return p.unflatten(v[:nw]), v[nw:-1], v[-1]

    def loss_and_grad(v, idx):
        q, hw, hb = unpack(v)
        Z, cache = mlp_forward(q, X[idx])
        r = Z @ hw + hb - y[idx]
        g_pred = 2.0 * r / idx.size
        gq, _ = mlp_backward(q, cache, np.outer(g_pred, hw))
        return float(np.mean(r * r)), np.concatenate([gq.flatten(), Z.T @ g_pred, [g_pred.sum()]])

    n = X.shape[0]
    initial, _ = loss_and_grad(vec, np.arange(n))
    trace, bad = [], 0
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.decay_factor ** (epoch // cfg.decay_every)
        order = rng.permutation(n)
        total = 0.0
        try:
            for s in range(0, n, cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, g = loss_and_grad(vec, idx)
                total += loss * idx.size
                vel = cfg.momentum * vel - lr * g
                vec = vec + vel
        except NumericalError:
            raise TrainingError("pre-training diverged to non-finite values; lower pretrain.learning_rate") from None
        epoch_loss = total / n
        trace.append(epoch_loss)
        bad = bad + 1 if (not np.isfinite(epoch_loss) or epoch_loss > 10.0 * initial) else 0
        if bad >= 3:
            raise TrainingError(
                f"pre-training diverged (loss {epoch_loss:.3g} > 10x initial {initial:.3g} for 3 epochs); "
                "lower pretrain.learning_rate"
            )
    return unpack(vec)[0], trace


# --------------------------------------------------------------------------
# kernel initialization


def _median_nn_spacing(Z: np.ndarray) -> float:
    if Z.shape[0] < 2:
        return 1.0
    d, _ = cKDTree(Z).query(Z, k=2)
    d = d[:, 1]
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def init_sm_params(Z, y_var: float, Q: int, grid: Optional[GridSpec] = None, seed: int = 0, zero_frequency=False) -> SmParams:
    """Data-driven spectral mixture start.

    Weights make ``k(0) = y_var`` exactly (the normalizing factor of each
    component is divided out).  Length-scales are uniform in [0.1, 2] times
    the feature spread; frequencies are uniform below both half the inverse
    median nearest-neighbour spacing and the lattice Nyquist limit.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    rng = np.random.default_rng(seed)
    D = Z.shape[1]
    sd = Z.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    ell = rng.uniform(0.1, 2.0, size=(Q, D)) * sd
    log_b = -2.0 * np.log(ell)
    fmax = np.full(D, 1.0 / (2.0 * _median_nn_spacing(Z)))
    if grid is not None:
        fmax = np.minimum(fmax, 1.0 / (2.0 * np.array(grid.spacing)))
    freq = np.zeros((Q, D)) if zero_frequency else rng.uniform(0.0, 1.0, size=(Q, D)) * fmax * (1 - 1e-9)
    log_w = np.log(y_var / Q) + 0.5 * D * np.log(2 * np.pi) - 0.5 * log_b.sum(axis=1)
    return SmParams(log_w, log_b, freq)


def init_rbf_params(Z, y_var: float) -> RbfParams:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    sd = Z.std(axis=0)
    ell = 0.5 * float(np.mean(np.where(sd > 0, sd, 1.0)))
    return RbfParams(np.log(ell), 0.5 * np.log(y_var))


def auto_nodes(n: int, d: int, base_kernel: str) -> int:
    """Per-axis node count ~ 4 n^(1/d), capped so BTTB lattices stay <= 4096 nodes."""
    nodes = max(4, math.ceil(4 * n ** (1.0 / d)))
    if base_kernel == "sm":
        nodes = min(nodes, int(BTTB_MAX_NODES ** (1.0 / d) + 1e-9))
    return min(nodes, 4096 if d == 1 else int((1 << 20) ** (1.0 / d)))


# --------------------------------------------------------------------------
# joint training


@dataclass
class FitReport:
    mll_trace: List[float] = field(default_factory=list)
    pretrain_loss: List[float] = field(default_factory=list)
    cg_iters: List[int] = field(default_factory=list)
    iter_seconds: List[float] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    grid_rebuilds: int = 0
    cg_unconverged: int = 0
    hyperparameters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _outside_core_fraction(Z: np.ndarray, grid: GridSpec) -> float:
    if grid.core_lo is None:
        return 0.0
    out = np.any((Z < np.array(grid.core_lo)) | (Z > np.array(grid.core_hi)), axis=1)
    return float(out.mean())


def _prepare(model: KissGpModel, policy: str, padding: float) -> bool:
    """Refresh ``model``, rebuilding its grid if the policy asks; True if rebuilt."""
    Z = model.features()
    rebuild = policy == "fraction" and _outside_core_fraction(Z, model.grid) > 0.01
    if not rebuild:
        try:
            model.refresh()
            return False
        except GridRangeError as e:
            if policy == "never":
                raise TrainingError(f"features left the lattice and grid_rebuild_policy is 'never' ({e})") from None
    model.update(grid=build_grid(Z, model.grid.counts, padding))
    model.refresh()
    return True


def fit_joint(model: KissGpModel, y, cfg: JointConfig, padding: float = 0.25, report: Optional[FitReport] = None) -> FitReport:
    """Adam ascent on the KISS marginal likelihood.

    ``warmup_theta_steps`` steps move only (theta, log_noise) on the current
    features; then ``iterations`` joint steps move everything.
    ``mll_trace[i]`` is the objective before step i, with one final entry
    after the last step.
    """
    y = np.asarray(y, dtype=np.float64)
    report = report or FitReport()
    model.cg = CgConfig(tol=cfg.cg_tol, max_iters=cfg.cg_max_iters)
    nw = 0 if model.mlp is None else model.mlp.size
    vec = model.param_vector()
    lr = np.full(vec.size, cfg.theta_learning_rate)
    lr[:nw] = cfg.learning_rate
    state = AdamState.zeros(vec.size, lr=1.0)
    total = cfg.warmup_theta_steps + cfg.iterations
    failures = 0
    t0 = time.perf_counter()
    for it in range(total + 1):
        ts = time.perf_counter()
        if _prepare(model, cfg.grid_rebuild_policy, padding):
            report.grid_rebuilds += 1
        warm = it < cfg.warmup_theta_steps
        g = kiss_mll_grads(
            model,
            y,
            mode=cfg.gradient_mode,
            freeze_interp=cfg.freeze_interp or warm,
            probes=cfg.probe_count,
            probe_seed=cfg.seed,
        )
        stats = g.report.cg_stats
        report.mll_trace.append(g.report.value)
        report.cg_iters.append(stats.iters if stats else 0)
        missed = stats is not None and not stats.converged
        report.cg_unconverged += int(missed)
        # small misses only cost gradient precision; the guard trips on real failures
        failed = missed and not stats.final_rel_residual <= np.sqrt(cfg.cg_tol)
        failures = failures + 1 if failed else 0
        if failures > 5:
            raise TrainingError(
                f"CG failed to converge on {failures} consecutive iterations "
                f"(residual {stats.final_rel_residual:.3g}); increase noise or joint.cg_max_iters"
            )
        if it == total:
            break
        grad = g.vector()
        if warm:
            grad[:nw] = 0.0
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient at step {it}")
        step, state = adam_step(np.zeros_like(vec), grad, state, maximize=True)
        vec = vec + lr * step
        model.set_param_vector(vec)
        report.iter_seconds.append(time.perf_counter() - ts)
    report.timings["joint"] = time.perf_counter() - t0
    report.hyperparameters = {
        "kernel": model.base.to_dict(),
        "log_noise": model.log_noise,
        "grid": model.grid.to_dict(),
    }
    return report


# --------------------------------------------------------------------------
# end-to-end


@dataclass
class TrainedModel:
    """Everything needed to predict: the GP, data scaling and training set."""

    gp: KissGpModel
    scaler: Standardizer
    y_train: np.ndarray  # standardized


def build_model(Xs, ys, cfg: TrainConfig, mlp: Optional[MlpParams]) -> KissGpModel:
    Z = Xs if mlp is None else mlp_forward(mlp, Xs)[0]
    n, d = Z.shape
    nodes = cfg.grid.nodes_per_axis
    if nodes == "auto":
        nodes = auto_nodes(n, d, cfg.base_kernel)
    grid = build_grid(Z, nodes, cfg.grid.padding)
    var = float(np.var(ys))
    log_noise = 0.5 * np.log(0.1 * var)
    if cfg.base_kernel == "rbf":
        return KissGpModel(init_rbf_params(Z, var), log_noise, grid, Xs, mlp, strategy=KRON)
    # several SM starts, the first with zero frequencies; keep the best objective
    best, best_val = None, -np.inf
    for c in range(cfg.init_candidates):
        base = init_sm_params(Z, var, cfg.q, grid, seed=cfg.joint.seed * 7919 + c, zero_frequency=(c == 0))
        model = KissGpModel(base, log_noise, grid, Xs, mlp, strategy=BTTB).refresh()
        val = kiss_mll(model, ys).value
        if best is None or val > best_val:
            best, best_val = model, val
    return best


def train(X, y, cfg: TrainConfig) -> Tuple[TrainedModel, FitReport]:
    """Standardize, pre-train the network, build the lattice, fit jointly."""
    cfg.validate()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if cfg.standardize:
        Xs, ys, scaler = standardize(X, y)
    else:
        Xs, ys, scaler = X, np.asarray(y, dtype=np.float64), Standardizer.identity(X.shape[1])
    report = FitReport()
    t0 = time.perf_counter()
    arch = MlpArch([X.shape[1]] + list(cfg.network.hidden) + [cfg.network.output_dim])
    mlp, report.pretrain_loss = pretrain_dnn(arch, Xs, ys, cfg.pretrain)
    report.timings["pretrain"] = time.perf_counter() - t0
    model = build_model(Xs, ys, cfg, mlp)
    joint = cfg.joint
    if not cfg.joint_enabled:
        # GP on frozen features: only the kernel warm-up runs
        joint = JointConfig(**{**asdict(cfg.joint), "iterations": 0})
    fit_joint(model, ys, joint, cfg.grid.padding, report)
    precompute_predictor(model, ys)
    return TrainedModel(model, scaler, ys), report


# --------------------------------------------------------------------------
# exact baselines


def fit_exact_gp(X, y, base_kernel: str = "rbf", q: int = 4, seed: int = 0, restarts: int = 5, maxiter: int = 200) -> ExactGpModel:
    """Type-II maximum likelihood for an exact GP (L-BFGS with random restarts)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    var = float(np.var(y))
    rng = np.random.default_rng(seed)
    rbf = init_rbf_params(X, var)
    best = None
    if base_kernel == "sm":
        # first start: the fitted RBF model spread over Q zero-frequency components
        rbf_fit = fit_exact_gp(X, y, "rbf", seed=seed, restarts=restarts, maxiter=maxiter)
        starts = [_sm_from_rbf(rbf_fit.base, X.shape[1], q, rng)]
        log_noise0 = [rbf_fit.log_noise]
        for _ in range(restarts - 1):
            starts.append(init_sm_params(X, var, q, seed=int(rng.integers(2**31))))
            log_noise0.append(0.5 * np.log(0.1 * var))
    else:
        starts = [RbfParams(rbf.log_lengthscale + rng.normal(0, 1.0) * (r > 0), rbf.log_outputscale) for r in range(restarts)]
        log_noise0 = [0.5 * np.log(0.1 * var)] * restarts
    for base, ln0 in zip(starts, log_noise0):
        x0 = np.r_[base.to_vector(), ln0]

        def neg(v, base=base):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    m = ExactGpModel(base.with_vector(v[:-1]), v[-1], X)
                    val = exact_mll(m, y).value
                    g_t, g_n = exact_mll_grads(m, y)
            except NumericalError:
                return 1e25, np.zeros_like(v)
            if not (np.isfinite(val) and np.all(np.isfinite(g_t)) and np.isfinite(g_n)):
                return 1e25, np.zeros_like(v)
            return -val, -np.r_[g_t, g_n]

        res = scipy.optimize.minimize(neg, x0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
        if best is None or res.fun < best[0].fun:
            best = (res, base)
    res, base = best
    v = res.x
    return ExactGpModel(base.with_vector(v[:-1]), float(v[-1]), X)


def _sm_from_rbf(p: RbfParams, D: int, q: int, rng) -> SmParams:
    """Zero-frequency SM whose components share the RBF amplitude, with jittered length-scales."""
    ell = np.exp(p.log_lengthscale) * np.exp(rng.normal(0, 0.3, size=(q, D)))
    ell[0] = np.exp(p.log_lengthscale)
    log_b = -2.0 * np.log(ell)
    s2 = np.exp(2 * p.log_outputscale)
    log_w = np.log(s2 / q) + 0.5 * D * np.log(2 * np.pi) - 0.5 * log_b.sum(axis=1)
    return SmParams(log_w, log_b, np.zeros((q, D)))
