"""CSV ingestion and the synthetic step-function generator."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ContractError, DataIOError

log = logging.getLogger("deepkiss")

# piecewise-constant target for gen_step
STEP_BREAKS = (0.2, 0.4, 0.6, 0.8)
STEP_LEVELS = (0.0, 1.0, 0.0, 1.0, 0.0)


@dataclass
class Dataset:
    X: np.ndarray
    y: Optional[np.ndarray]
    feature_names: List[str]
    target_name: Optional[str] = None
    dropped: int = 0
    scaler: object = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.X.shape[1] != len(self.feature_names):
            raise ContractError("feature name count does not match X columns")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.float64)
            if self.y.shape != (self.X.shape[0],):
                raise ContractError("y must have one entry per row of X")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]


def _parse(tok: str) -> float:
    v = float(tok)
    if not math.isfinite(v):
        raise ValueError("non-finite")
    return v


def load_csv(path, target_column: Optional[str] = "y", delimiter: str = ",", feature_names=None, min_rows: int = 2) -> Dataset:
    """Read a headed numeric CSV.

    Rows with a missing, non-numeric or non-finite feature (or a NaN/Inf
    target) are dropped and counted; a target that is not a number at all
    is an error.  ``target_column=None`` reads features only.  With
    ``feature_names`` the listed columns are taken in that order.
    """
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataIOError(f"cannot read data file {path}: {e.strerror}") from None
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise DataIOError(f"data file {path} is empty")
        header = [h.strip() for h in header]
        if target_column is not None and target_column not in header:
            raise DataIOError(f"target column '{target_column}' not found in {path} (columns: {', '.join(header)})")
        t_idx = header.index(target_column) if target_column is not None else None
        if feature_names is None:
            f_idx = [i for i in range(len(header)) if i != t_idx]
        else:
            missing = [f for f in feature_names if f not in header]
            if missing:
                raise DataIOError(f"feature columns {missing} not found in {path}")
            f_idx = [header.index(f) for f in feature_names]
        if not f_idx:
            raise DataIOError(f"{path} has no feature columns")
        X, y, dropped = [], [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                dropped += 1
                continue
            if t_idx is not None:
                tok = row[t_idx].strip()
                try:
                    t = float(tok)
                except ValueError:
                    if tok == "":
                        dropped += 1
                        continue
                    raise DataIOError(f"non-numeric target value '{tok}' on line {lineno} of {path}") from None
                if not math.isfinite(t):
                    dropped += 1
                    continue
            try:
                xs = [_parse(row[i]) for i in f_idx]
            except ValueError:
                dropped += 1
                continue
            X.append(xs)
            if t_idx is not None:
                y.append(t)
    if dropped:
        log.warning("dropped %d malformed or non-finite row(s) from %s", dropped, path)
    if len(X) < min_rows:
        raise DataIOError(f"{path} has {len(X)} usable row(s); need at least {min_rows}")
    names = [header[i] for i in f_idx]
    return Dataset(np.array(X), np.array(y) if t_idx is not None else None, names, target_column, dropped)


def save_csv(path, data: Dataset, extra: Optional[dict] = None) -> None:
    """Write features, the target (if any) and extra named columns, full precision."""
    cols = list(data.feature_names)
    arrays = [data.X[:, j] for j in range(data.D)]
    if data.y is not None:
        cols.append(data.target_name or "y")
        arrays.append(data.y)
    for name, arr in (extra or {}).items():
        cols.append(name)
        arrays.append(np.asarray(arr, dtype=np.float64))
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*arrays):
                w.writerow([repr(float(v)) for v in row])
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e.strerror}") from None


def step_function(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(STEP_LEVELS)[np.searchsorted(STEP_BREAKS, x, side="right")]


def gen_step(n: int, noise_sd: float, seed: int) -> Dataset:
    """``n`` uniform inputs on [0, 1] and a noisy 0/1 step target."""
    if n < 10:
        raise ContractError("gen_step needs n >= 10")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    y = step_function(x) + noise_sd * rng.normal(size=n)
    return Dataset(x[:, None], y, ["x"], "y")
