"""
Baselines Module
Least-squares linear regression and a single network trained exactly like one ensemble member
"""

import os
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

import config
import ensemble
from ensemble import EnsembleConfig, EnsembleModel, PredictionRecord
from featurize import LabeledTrip, Standardizer, Task, apply_standardizer, feature_matrix, fit_standardizer
from logger_config import get_logger
from validation import InsufficientDataError, ValidationError, check_feature_alignment
from ved_ingest import VehicleType

logger = get_logger("Baselines")

LINEAR_FORMAT = "effiq-linear"
LINEAR_VERSION = 1


@dataclass(frozen=True)
class LinearModel:
    """y = weights . x + intercept in standardized feature space"""
    weights: np.ndarray
    intercept: float

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.weights + self.intercept


@dataclass(frozen=True)
class LinearBaseline:
    model: LinearModel
    standardizer: Standardizer
    feature_names: tuple
    task: Task
    vehicle_type: VehicleType


def fit_linear(X: np.ndarray, y: np.ndarray, ridge_eps: float = config.RIDGE_EPS) -> LinearModel:
    """
    Ordinary least squares through the normal equations

    ridge_eps is added to the weight part of the diagonal only; the intercept
    is unpenalized so shifting y shifts nothing but the intercept.

    Raises:
        InsufficientDataError: fewer samples than features
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, d = X.shape
    if n < d or n == 0:
        raise InsufficientDataError(
            f"Linear regression has {n} samples for {d} features; add data or raise ridge_eps")
    A = np.hstack([X, np.ones((n, 1))])
    gram = A.T @ A
    gram[np.arange(d), np.arange(d)] += ridge_eps
    coef = np.linalg.solve(gram, A.T @ y)
    if not np.isfinite(coef).all():
        raise ValidationError("Linear regression produced non-finite coefficients; raise ridge_eps")
    return LinearModel(weights=coef[:d], intercept=float(coef[d]))


def fit_linear_baseline(trainset: Sequence[LabeledTrip], ridge_eps: float = config.RIDGE_EPS) -> LinearBaseline:
    if not trainset:
        raise InsufficientDataError("Cannot fit a linear baseline on an empty training set")
    X, y, names = feature_matrix(trainset)
    standardizer = fit_standardizer(X, names)
    model = fit_linear(apply_standardizer(standardizer, X, names), y, ridge_eps)
    first = trainset[0]
    logger.info(f"Fitted linear baseline on {len(y)} trips, {len(standardizer.kept)} features")
    return LinearBaseline(model=model, standardizer=standardizer, feature_names=tuple(names),
                          task=first.task, vehicle_type=first.vehicle_type)


def predict_linear(baseline: LinearBaseline, rows: Sequence[LabeledTrip]) -> List[PredictionRecord]:
    if not rows:
        return []
    X, _, names = feature_matrix(rows)
    check_feature_alignment(baseline.feature_names, names)
    preds = baseline.model.predict(apply_standardizer(baseline.standardizer, X, names))
    records = [PredictionRecord(veh_id=r.veh_id, trip_id=r.trip_id, start_datetime=r.start_datetime,
                                month=r.month, task=r.task, target=r.target, pred_mean=float(p))
               for r, p in zip(rows, preds)]
    return ensemble.sort_chronologically(records)


def single_nn(trainset: Sequence[LabeledTrip], cfg: EnsembleConfig = EnsembleConfig()) -> EnsembleModel:
    """One network with the member settings; the same code path as a one-member ensemble"""
    return ensemble.train(trainset, ensemble.with_members(cfg, 1))


def save_linear(baseline: LinearBaseline, path: str) -> None:
    std = baseline.standardizer
    lines = [
        f"format={LINEAR_FORMAT}",
        f"version={LINEAR_VERSION}",
        f"vehicle_type={baseline.vehicle_type.value}",
        f"task={baseline.task.value}",
        f"feature_names={','.join(baseline.feature_names)}",
        f"standardizer_kept={','.join(std.kept)}",
        f"standardizer_mean={','.join(float(v).hex() for v in std.mean)}",
        f"standardizer_scale={','.join(float(v).hex() for v in std.scale)}",
        f"standardizer_passthrough={','.join(std.passthrough)}",
        f"standardizer_dropped={','.join(std.dropped)}",
        f"weights={','.join(float(w).hex() for w in baseline.model.weights)}",
        f"intercept={float(baseline.model.intercept).hex()}",
    ]
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


def load_linear(path: str) -> LinearBaseline:
    with open(path, "r", encoding="utf-8") as handle:
        meta = dict(line.rstrip("\n").split("=", 1) for line in handle if "=" in line)
    if meta.get("format") != LINEAR_FORMAT or int(meta.get("version", 0)) != LINEAR_VERSION:
        raise ValidationError(f"{path} is not a version {LINEAR_VERSION} linear baseline file")

    def names(key: str) -> tuple:
        return tuple(v for v in meta[key].split(",") if v)

    def floats(key: str) -> tuple:
        return tuple(float.fromhex(v) for v in names(key))

    standardizer = Standardizer(feature_names=names("feature_names"), kept=names("standardizer_kept"),
                                mean=floats("standardizer_mean"), scale=floats("standardizer_scale"),
                                passthrough=names("standardizer_passthrough"),
                                dropped=names("standardizer_dropped"))
    model = LinearModel(weights=np.array(floats("weights"), dtype=float),
                        intercept=float.fromhex(meta["intercept"]))
    return LinearBaseline(model=model, standardizer=standardizer, feature_names=names("feature_names"),
                          task=Task(meta["task"]), vehicle_type=VehicleType(meta["vehicle_type"]))
