"""Lasso-based evaluation of region embeddings with k-fold cross-validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .data import split_kfold


@dataclass(frozen=True)
class LassoConfig:
    alpha: float = 1.0
    max_iter: int = 10000
    tol: float = 1e-7
    standardize: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class LassoFit:
    weights: np.ndarray
    intercept: float
    converged: bool
    n_iter: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.intercept

    def __iter__(self):
        yield self.weights
        yield self.intercept


def soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def lasso_objective(x, y, w, b, alpha) -> float:
    r = y - x @ w - b
    return float(r @ r) / (2 * len(y)) + alpha * float(np.abs(w).sum())


def lasso_fit(x, y, cfg: LassoConfig = LassoConfig()) -> LassoFit:
    """Cyclic coordinate descent on ``(1/2m)||y - Xw - b||^2 + alpha ||w||_1``.

    The intercept is never penalized.  With ``cfg.standardize`` the columns
    are z-scored on the data given (population std; constant columns are left
    unscaled) and the returned weights are mapped back to the raw feature scale.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    m, d = x.shape
    if m < 2:
        raise ValueError("lasso_fit needs at least 2 samples")
    if y.shape[0] != m:
        raise ValueError(f"{m} rows in X but {y.shape[0]} targets")

    x_mean = x.mean(axis=0)
    scale = np.ones(d)
    if cfg.standardize:
        std = x.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
    xs = (x - x_mean) / scale
    y_mean = y.mean()
    yc = y - y_mean

    col_sq = (xs * xs).sum(axis=0) / m
    w = np.zeros(d)
    resid = yc.copy()
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        max_step = 0.0
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            old = w[j]
            rho = xs[:, j] @ resid / m + col_sq[j] * old
            new = soft_threshold(rho, cfg.alpha) / col_sq[j]
            if new != old:
                resid -= xs[:, j] * (new - old)
                w[j] = new
                max_step = max(max_step, abs(new - old))
        if max_step < cfg.tol:
            converged = True
            break

    weights = w / scale
    intercept = float(y_mean - x_mean @ weights)
    return LassoFit(weights, intercept, converged, it)


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    r2: float
    r2_defined: bool = True


def compute_metrics(y, y_hat) -> Metrics:
    """MAE, RMSE and R^2 (mean of ``y`` taken over the evaluated set).

    A constant ``y`` makes R^2 undefined; it is reported as NaN with
    ``r2_defined`` false rather than dividing by zero.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise ValueError("y and y_hat differ in length")
    if y.shape[0] < 2:
        raise ValueError("need at least 2 values")
    err = y - y_hat
    mae = float(np.abs(err).sum() / len(y))
    sse = float(err @ err)
    rmse = math.sqrt(sse / len(y))
    dev = y - y.mean()
    sst = float(dev @ dev)
    if sst == 0.0:
        return Metrics(mae, rmse, float("nan"), r2_defined=False)
    return Metrics(mae, rmse, 1.0 - sse / sst)


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    mae: float
    rmse: float
    r2: float
    converged: bool


@dataclass
class EvalReport:
    task: str
    k: int
    seed: int
    folds: List[FoldResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def _stat(self, attr: str):
        vals = np.array([getattr(f, attr) for f in self.folds], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            return float("nan"), float("nan")
        return float(vals.mean()), float(vals.std())

    @property
    def mean(self) -> dict:
        return {a: self._stat(a)[0] for a in ("mae", "rmse", "r2")}

    @property
    def std(self) -> dict:
        return {a: self._stat(a)[1] for a in ("mae", "rmse", "r2")}

    @property
    def converged(self) -> bool:
        return all(f.converged for f in self.folds)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "k": self.k,
            "seed": self.seed,
            "folds": [asdict(f) for f in self.folds],
            "mean": self.mean,
            "std": self.std,
            "converged": self.converged,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"task: {self.task}  folds: {self.k}  seed: {self.seed}",
                 f"{'fold':>4} {'MAE':>12} {'RMSE':>12} {'R2':>10}"]
        for f in self.folds:
            flag = "" if f.converged else "  (not converged)"
            lines.append(f"{f.fold:>4} {f.mae:>12.4f} {f.rmse:>12.4f} {f.r2:>10.4f}{flag}")
        mean, std = self.mean, self.std
        lines.append(
            f"{'mean':>4} {mean['mae']:>12.4f} {mean['rmse']:>12.4f} {mean['r2']:>10.4f}"
        )
        lines.append(f"{'std':>4} {std['mae']:>12.4f} {std['rmse']:>12.4f} {std['r2']:>10.4f}")
        return "\n".join(lines) + "\n"


def kfold_evaluate(
    h,
    y,
    k: int = 10,
    seed: int = 0,
    cfg: LassoConfig = LassoConfig(),
    task: str = "task",
) -> EvalReport:
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if h.shape[0] != y.shape[0]:
        raise ValueError(f"embeddings have {h.shape[0]} rows, target has {y.shape[0]}")
    report = EvalReport(task=task, k=k, seed=seed, config=asdict(cfg))
    for i, (tr, te) in enumerate(split_kfold(len(y), k, seed)):
        fit = lasso_fit(h[tr], y[tr], cfg)
        metrics = compute_metrics(y[te], fit.predict(h[te]))
        report.folds.append(
            FoldResult(i, len(tr), len(te), metrics.mae, metrics.rmse, metrics.r2, fit.converged)
        )
    return report
