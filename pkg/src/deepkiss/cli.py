"""Command-line entry point: ``deepkiss {train,predict,eval,gen}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import __version__
from .data import Dataset, gen_step, load_csv, save_csv
from .errors import ConfigError, DataIOError, DeepKissError, FormatVersionError
from .gp import KissGpModel, precompute_predictor, predict
from .interp import GridSpec
from .kernels import params_from_dict
from .nn import MlpParams
from .train import Standardizer, TrainConfig, TrainedModel, train

MODEL_FORMAT = "deepkiss-model"
FORMAT_VERSION = "1.0"
EXIT_CODES = {"io": 2, "config": 3, "version": 4}
Z95 = 1.959963984540054


# --------------------------------------------------------------------------
# model files


def model_to_dict(tm: TrainedModel, feature_names, target_name, cfg: Optional[TrainConfig] = None) -> dict:
    gp = tm.gp
    return {
        "format": MODEL_FORMAT,
        "format_version": FORMAT_VERSION,
        "feature_names": list(feature_names),
        "target_name": target_name,
        "config": cfg.to_dict() if cfg is not None else None,
        "mlp": gp.mlp.to_dict() if gp.mlp is not None else None,
        "kernel": gp.base.to_dict(),
        "log_noise": gp.log_noise,
        "grid": gp.grid.to_dict(),
        "strategy": gp.strategy,
        "cg": {"tol": gp.cg.tol, "max_iters": gp.cg.max_iters},
        "scaler": tm.scaler.to_dict(),
        "train_X": gp.X.tolist(),
        "train_y": tm.y_train.tolist(),
    }


def model_from_dict(d: dict) -> tuple:
    """Rebuild a ready-to-predict model; returns (TrainedModel, feature_names, target_name)."""
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise DataIOError("not a deepkiss model file")
    ver = str(d.get("format_version", ""))
    if ver.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise FormatVersionError(f"model format version {ver!r} is not supported (expected {FORMAT_VERSION})")
    try:
        from .linalg import CgConfig

        mlp = MlpParams.from_dict(d["mlp"]) if d["mlp"] is not None else None
        gp = KissGpModel(
            params_from_dict(d["kernel"]),
            float(d["log_noise"]),
            GridSpec.from_dict(d["grid"]),
            np.array(d["train_X"], dtype=np.float64),
            mlp,
            strategy=d["strategy"],
            cg=CgConfig(**d["cg"]),
        )
        y = np.array(d["train_y"], dtype=np.float64)
        scaler = Standardizer.from_dict(d["scaler"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataIOError(f"model file is malformed: {e}") from None
    precompute_predictor(gp, y)
    return TrainedModel(gp, scaler, y), d["feature_names"], d.get("target_name")


def save_model(path, tm: TrainedModel, feature_names, target_name, cfg=None) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(model_to_dict(tm, feature_names, target_name, cfg), fh)
    except OSError as e:
        raise DataIOError(f"cannot write model file {path}: {e.strerror}") from None


def load_model(path) -> tuple:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as e:
        raise DataIOError(f"cannot read model file {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise DataIOError(f"model file {path} is not valid JSON: {e}") from None
    return model_from_dict(d)


# --------------------------------------------------------------------------
# prediction and evaluation


@dataclass
class PredictionTable:
    mean: np.ndarray
    variance: np.ndarray  # latent, destandardized
    noise_var: float  # destandardized
    lower95: np.ndarray
    upper95: np.ndarray


def predict_table(tm: TrainedModel, X) -> PredictionTable:
    p = predict(tm.gp, tm.scaler.x(X), want_variance=True)
    mean = tm.scaler.y_inverse(p.mean)
    var = tm.scaler.var_inverse(p.variance)
    noise = float(tm.scaler.var_inverse(p.noise))
    half = Z95 * np.sqrt(var + noise)
    return PredictionTable(mean, var, noise, mean - half, mean + half)


@dataclass
class EvalReport:
    rmse: float
    nlpd: float
    coverage95: float
    n: int
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(mean, obs_var, y, seconds: float = 0.0) -> EvalReport:
    """RMSE, mean Gaussian NLPD and central-95% coverage of predictions for ``y``."""
    mean, obs_var, y = (np.asarray(a, dtype=np.float64) for a in (mean, obs_var, y))
    r = y - mean
    nlpd = 0.5 * np.log(2 * np.pi * obs_var) + 0.5 * r * r / obs_var
    cover = np.abs(r) <= Z95 * np.sqrt(obs_var)
    return EvalReport(float(np.sqrt(np.mean(r * r))), float(np.mean(nlpd)), float(np.mean(cover)), int(y.size), seconds)


# --------------------------------------------------------------------------
# commands


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.pretrain.seed = cfg.joint.seed = args.seed
    if args.base_kernel is not None:
        cfg.base_kernel = args.base_kernel
    if args.q is not None:
        cfg.q = args.q
    if args.grid_nodes is not None:
        cfg.grid.nodes_per_axis = args.grid_nodes
    if args.no_joint:
        cfg.joint_enabled = False
    if args.freeze_interp:
        cfg.joint.freeze_interp = True
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    data = load_csv(args.data, args.target_column)
    tm, report = train(data.X, data.y, cfg)
    save_model(args.model, tm, data.feature_names, data.target_name, cfg)
    out = report.to_dict()
    out["n"], out["dropped_rows"] = data.n, data.dropped
    json.dump(out, sys.stdout)
    sys.stdout.write("\n")
    return 0


def cmd_predict(args) -> int:
    tm, names, _ = load_model(args.model)
    data = load_csv(args.data, None, feature_names=names, min_rows=1)
    t = predict_table(tm, data.X)
    save_csv(
        args.out,
        Dataset(data.X, None, names),
        {"mean": t.mean, "variance": t.variance, "lower95": t.lower95, "upper95": t.upper95},
    )
    return 0


def cmd_eval(args) -> int:
    tm, names, target = load_model(args.model)
    data = load_csv(args.data, args.target_column or target or "y", feature_names=names, min_rows=1)
    t0 = time.perf_counter()
    t = predict_table(tm, data.X)
    rep = evaluate(t.mean, t.variance + t.noise_var, data.y, time.perf_counter() - t0)
    json.dump(rep.to_dict(), sys.stdout)
    sys.stdout.write("\n")
    return 0


def cmd_gen(args) -> int:
    seed = 0 if args.seed is None else args.seed
    save_csv(args.out, gen_step(args.n, args.noise_sd, seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepkiss", description="Deep kernel learning with KISS-GP.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="fit a model to a CSV file")
    tr.add_argument("--config")
    tr.add_argument("--data", required=True)
    tr.add_argument("--model", required=True, help="output model file")
    tr.add_argument("--target-column", default="y")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--base-kernel", choices=["rbf", "sm"])
    tr.add_argument("--q", type=int)
    tr.add_argument("--grid-nodes", type=int)
    tr.add_argument("--no-joint", action="store_true", help="skip the joint phase")
    tr.add_argument("--freeze-interp", action="store_true", help="hold M fixed during joint training")
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write predictive mean and 95%% bands")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="RMSE, NLPD and coverage on labelled data")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--target-column")
    ev.set_defaults(func=cmd_eval)

    gn = sub.add_parser("gen", help="write the synthetic step-function data set")
    gn.add_argument("--out", required=True)
    gn.add_argument("--n", type=int, default=100)
    gn.add_argument("--noise-sd", type=float, default=0.05)
    gn.add_argument("--seed", type=int)
    gn.set_defaults(func=cmd_gen)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DeepKissError as e:
        err = {"category": e.category, "message": str(e)}
        if isinstance(e, ConfigError) and e.key is not None:
            err["key"] = e.key
        sys.stderr.write(json.dumps({"error": err}) + "\n")
        return EXIT_CODES.get(e.category, 1)


if __name__ == "__main__":
    sys.exit(main())
