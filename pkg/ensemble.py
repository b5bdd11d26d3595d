"""
Deep Ensemble Module
Trains M independently seeded heteroscedastic networks, aggregates them as a uniformly
weighted Gaussian mixture and runs the learning-rate grid search
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
import prob_net
from featurize import (LabeledTrip, Standardizer, TargetScaling, Task, apply_standardizer, feature_matrix,
                       fit_standardizer, fit_target_scaling, stratified_split, task_label)
from logger_config import get_logger
from prob_net import GaussianPrediction, NetworkParams, TrainingHistory
from validation import (DivergenceError, InsufficientDataError, ValidationError, check_feature_alignment,
                        require_columns)
from ved_ingest import VehicleType, format_cell, id_sort_key

logger = get_logger("Ensemble")

MODEL_META_FILE = "model.meta"
MODEL_FORMAT = "effiq-ensemble"
MODEL_VERSION = 2
PRED_COLUMNS = ["veh_id", "trip_id", "start_iso", "month", "task", "target", "pred_mean", "pred_var"]


@dataclass(frozen=True)
class EnsembleConfig:
    members: int = config.MEMBERS
    epochs: int = config.EPOCHS
    batch_size: int = config.BATCH_SIZE
    lr: float = config.LEARNING_RATE
    adv_eps: float = config.ADV_EPS
    seed: int = config.SEED
    hidden_widths: Tuple[int, ...] = config.HIDDEN_WIDTHS
    threads: int = 1

    @classmethod
    def from_run_config(cls, cfg) -> "EnsembleConfig":
        return cls(members=cfg.members, epochs=cfg.epochs, batch_size=cfg.batch, lr=cfg.lr,
                   adv_eps=cfg.adv_eps, seed=cfg.seed, hidden_widths=tuple(cfg.hidden_widths),
                   threads=cfg.threads)


@dataclass(frozen=True)
class EnsembleModel:
    members: Tuple[NetworkParams, ...]
    standardizer: Standardizer
    feature_names: Tuple[str, ...]
    task: Task
    vehicle_type: VehicleType
    config: EnsembleConfig
    target: TargetScaling = TargetScaling()
    histories: Tuple[TrainingHistory, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class PredictionRecord:
    """One row of preds.csv; pred_var is absent for point-prediction models"""
    veh_id: str
    trip_id: str
    start_datetime: datetime
    month: int
    task: Task
    target: Optional[float]
    pred_mean: float
    pred_var: Optional[float] = None

    @property
    def key(self) -> Tuple[str, str]:
        return self.veh_id, self.trip_id


@dataclass(frozen=True)
class GridSearchResult:
    best_lr: float
    losses: Dict[float, float]
    epochs: int

    def to_dict(self) -> Dict:
        return {
            "best_lr": self.best_lr,
            "epochs": self.epochs,
            "criterion": "validation NLL (z-scored target)",
            "losses": {repr(lr): (loss if math.isfinite(loss) else None) for lr, loss in self.losses.items()},
        }


def _task_of(rows: Sequence[LabeledTrip]) -> Tuple[VehicleType, Task]:
    tasks = {(r.vehicle_type, r.task) for r in rows}
    if len(tasks) != 1:
        raise ValidationError(f"Training rows must belong to a single task, got {sorted(tasks)}")
    return tasks.pop()


def train_members(Z: np.ndarray, y: np.ndarray, cfg: EnsembleConfig,
                  name: str = "ensemble") -> List[prob_net.TrainedNetwork]:
    """Member m trains with seed cfg.seed + m; results are returned by member index"""
    def work(m: int) -> prob_net.TrainedNetwork:
        return prob_net.train_network(Z, y, seed=cfg.seed + m, epochs=cfg.epochs,
                                      batch_size=cfg.batch_size, lr=cfg.lr, adv_eps=cfg.adv_eps,
                                      widths=cfg.hidden_widths, name=f"{name}/member_{m:02d}")

    workers = max(1, min(cfg.threads, cfg.members))
    if workers == 1:
        return [work(m) for m in range(cfg.members)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, range(cfg.members)))


def train(trainset: Sequence[LabeledTrip], cfg: EnsembleConfig = EnsembleConfig()) -> EnsembleModel:
    """
    Fit the feature standardizer and the target scaling on the training split
    and train cfg.members networks on the z-scored target

    Raises:
        InsufficientDataError: empty training set or no usable feature
    """
    if not trainset:
        raise InsufficientDataError("Cannot train on an empty training set")
    if cfg.members < 1:
        raise ValidationError(f"An ensemble needs at least one member, got {cfg.members}")
    vehicle_type, task = _task_of(trainset)
    X, y, names = feature_matrix(trainset)
    standardizer = fit_standardizer(X, names)
    if not standardizer.kept:
        raise InsufficientDataError("Every feature is constant on the training set")
    Z = apply_standardizer(standardizer, X, names)
    target = fit_target_scaling(y)

    label = task_label(vehicle_type, task)
    logger.info(f"Training {cfg.members} member(s) for {label} on {len(y)} trips, "
                f"{Z.shape[1]} features, target {target.mean:.4g} +- {target.scale:.4g}, "
                f"lr={cfg.lr:g}, threads={cfg.threads}")
    trained = train_members(Z, target.apply(y), cfg, name=label)
    diverged = [m for m, t in enumerate(trained) if t.history.diverged]
    if diverged:
        logger.warning(f"{label}: members {diverged} diverged at lr={cfg.lr:g}; consider a smaller --lr")
    stalled = [m for m, t in enumerate(trained) if not t.history.diverged and not t.history.improved]
    if stalled:
        logger.warning(f"{label}: members {stalled} ended above their initial training NLL at "
                       f"lr={cfg.lr:g}; consider a smaller --lr or more --epochs")
    return EnsembleModel(
        members=tuple(t.params for t in trained),
        standardizer=standardizer,
        feature_names=tuple(names),
        task=task,
        vehicle_type=vehicle_type,
        config=cfg,
        target=target,
        histories=tuple(t.history for t in trained),
    )


def mixture_moments(means: np.ndarray, variances: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Moment-matched Gaussian of a uniform mixture over axis 0

    Equivalent to mean(var + mu^2) - mu*^2, written as mean variance plus
    member disagreement so it never falls below the mean variance.
    """
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    mu_star = means.mean(axis=0)
    var_star = variances.mean(axis=0) + ((means - mu_star) ** 2).mean(axis=0)
    return mu_star, var_star


def aggregate(member_preds: Sequence[GaussianPrediction]) -> GaussianPrediction:
    if not member_preds:
        raise ValidationError("aggregate needs at least one member prediction")
    mu, var = mixture_moments(np.array([p.mean for p in member_preds]),
                              np.array([p.variance for p in member_preds]))
    return GaussianPrediction(mean=float(mu), variance=float(var))


def predict_standardized(model: EnsembleModel, Z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mixture (mean, variance) in target units for already standardized features"""
    outputs = [prob_net.forward_batch(params, Z) for params in model.members]
    mu, var = mixture_moments(np.stack([o[0] for o in outputs]), np.stack([o[1] for o in outputs]))
    mu, var = model.target.invert(mu, var)
    return mu, np.maximum(var, config.VARIANCE_FLOOR)


def predict(model: EnsembleModel, rows: Sequence[LabeledTrip]) -> List[PredictionRecord]:
    """
    Mixture prediction per trip, sorted chronologically

    Raises:
        AlignmentError: the rows' feature names differ from the model's
    """
    if not rows:
        return []
    X, _, names = feature_matrix(rows)
    check_feature_alignment(model.feature_names, names)
    mu, var = predict_standardized(model, apply_standardizer(model.standardizer, X, names))
    records = [PredictionRecord(veh_id=r.veh_id, trip_id=r.trip_id, start_datetime=r.start_datetime,
                                month=r.month, task=r.task, target=r.target,
                                pred_mean=float(m), pred_var=float(v))
               for r, m, v in zip(rows, mu, var)]
    return sort_chronologically(records)


def sort_chronologically(records: Sequence[PredictionRecord]) -> List[PredictionRecord]:
    return sorted(records, key=lambda r: (r.start_datetime, id_sort_key(r.veh_id), id_sort_key(r.trip_id)))


def grid_search_lr(trainset: Sequence[LabeledTrip], valset: Optional[Sequence[LabeledTrip]] = None,
                   grid: Sequence[float] = config.LR_GRID, cfg: EnsembleConfig = EnsembleConfig(),
                   epochs: int = config.GRID_EPOCHS,
                   train_frac: float = config.GRID_TRAIN_FRAC) -> GridSearchResult:
    """
    Pick the learning rate with the lowest validation NLL

    One member per learning rate on a reduced epoch budget, trained and scored
    on the target z-scored with the sub-training statistics. Without an explicit
    validation set a month-stratified sub-split of trainset is used. Diverged
    runs are excluded; ties go to the larger learning rate.

    Raises:
        DivergenceError: every learning rate diverged
    """
    if not grid:
        raise ValidationError("Learning-rate grid is empty")
    if valset is None:
        trainset, valset = stratified_split(trainset, train_frac, cfg.seed)
    if not trainset or not valset:
        raise InsufficientDataError(
            f"Grid search needs non-empty train and validation sets, got {len(trainset)}/{len(valset)}")

    X, y, names = feature_matrix(trainset)
    standardizer = fit_standardizer(X, names)
    Z = apply_standardizer(standardizer, X, names)
    Xv, yv, names_v = feature_matrix(valset)
    Zv = apply_standardizer(standardizer, Xv, names_v)
    target = fit_target_scaling(y)
    t, tv = target.apply(y), target.apply(yv)

    losses: Dict[float, float] = {}
    for lr in grid:
        trained = prob_net.train_network(Z, t, seed=cfg.seed, epochs=epochs, batch_size=cfg.batch_size,
                                         lr=lr, adv_eps=cfg.adv_eps, widths=cfg.hidden_widths,
                                         name=f"grid/lr={lr:g}")
        loss = float("nan") if trained.history.diverged else prob_net.batch_nll(trained.params, Zv, tv)
        losses[lr] = loss
        logger.info(f"Grid search lr={lr:g}: validation NLL {loss:.6f}")

    finite = {lr: loss for lr, loss in losses.items() if math.isfinite(loss)}
    if not finite:
        raise DivergenceError(losses)
    best = min(finite, key=lambda lr: (finite[lr], -lr))
    logger.info(f"Grid search selected lr={best:g}")
    return GridSearchResult(best_lr=best, losses=losses, epochs=epochs)


def _hex_list(values: Sequence[float]) -> str:
    return ",".join(float(v).hex() for v in values)


def _split(text: str) -> List[str]:
    return [part for part in text.split(",") if part]


def member_file(directory: str, m: int) -> str:
    return os.path.join(directory, f"member_{m:02d}")


def save_model(model: EnsembleModel, directory: str) -> None:
    """model.meta (config, feature names, feature and target scaling) plus one binary file per member"""
    os.makedirs(directory, exist_ok=True)
    std = model.standardizer
    cfg = model.config
    meta = [
        ("format", MODEL_FORMAT),
        ("version", str(MODEL_VERSION)),
        ("vehicle_type", model.vehicle_type.value),
        ("task", model.task.value),
        ("members", str(len(model.members))),
        ("seed", str(cfg.seed)),
        ("epochs", str(cfg.epochs)),
        ("batch_size", str(cfg.batch_size)),
        ("lr", float(cfg.lr).hex()),
        ("adv_eps", float(cfg.adv_eps).hex()),
        ("hidden_widths", ",".join(str(w) for w in cfg.hidden_widths)),
        ("feature_names", ",".join(model.feature_names)),
        ("standardizer_kept", ",".join(std.kept)),
        ("standardizer_mean", _hex_list(std.mean)),
        ("standardizer_scale", _hex_list(std.scale)),
        ("standardizer_passthrough", ",".join(std.passthrough)),
        ("standardizer_dropped", ",".join(std.dropped)),
        ("target_mean", float(model.target.mean).hex()),
        ("target_scale", float(model.target.scale).hex()),
    ]
    with open(os.path.join(directory, MODEL_META_FILE), "w", encoding="utf-8", newline="\n") as handle:
        handle.write("".join(f"{key}={value}\n" for key, value in meta))
    for m, params in enumerate(model.members):
        prob_net.save_params(params, member_file(directory, m))
    logger.info(f"Saved {len(model.members)}-member ensemble to {directory}")


def load_model(directory: str) -> EnsembleModel:
    meta_path = os.path.join(directory, MODEL_META_FILE)
    with open(meta_path, "r", encoding="utf-8") as handle:
        meta = dict(line.rstrip("\n").split("=", 1) for line in handle if "=" in line)
    if meta.get("format") != MODEL_FORMAT or int(meta.get("version", 0)) != MODEL_VERSION:
        raise ValidationError(f"{meta_path} is not a version {MODEL_VERSION} ensemble file")
    names = tuple(_split(meta["feature_names"]))
    standardizer = Standardizer(
        feature_names=names,
        kept=tuple(_split(meta["standardizer_kept"])),
        mean=tuple(float.fromhex(v) for v in _split(meta["standardizer_mean"])),
        scale=tuple(float.fromhex(v) for v in _split(meta["standardizer_scale"])),
        passthrough=tuple(_split(meta["standardizer_passthrough"])),
        dropped=tuple(_split(meta["standardizer_dropped"])),
    )
    cfg = EnsembleConfig(
        members=int(meta["members"]),
        epochs=int(meta["epochs"]),
        batch_size=int(meta["batch_size"]),
        lr=float.fromhex(meta["lr"]),
        adv_eps=float.fromhex(meta["adv_eps"]),
        seed=int(meta["seed"]),
        hidden_widths=tuple(int(w) for w in _split(meta["hidden_widths"])),
    )
    target = TargetScaling(mean=float.fromhex(meta["target_mean"]), scale=float.fromhex(meta["target_scale"]))
    members = tuple(prob_net.load_params(member_file(directory, m)) for m in range(cfg.members))
    for params in members:
        if params.input_dim != len(standardizer.kept):
            raise ValidationError(f"{directory}: member input size {params.input_dim} does not match "
                                  f"{len(standardizer.kept)} standardized features")
    return EnsembleModel(members=members, standardizer=standardizer, feature_names=names,
                         task=Task(meta["task"]), vehicle_type=VehicleType(meta["vehicle_type"]),
                         config=cfg, target=target)


def with_members(cfg: EnsembleConfig, members: int) -> EnsembleConfig:
    return replace(cfg, members=members)


def write_predictions(records: Sequence[PredictionRecord], path: str) -> None:
    rows = [[r.veh_id, r.trip_id, r.start_datetime.isoformat(), str(r.month), r.task.value,
             format_cell(r.target), format_cell(r.pred_mean), format_cell(r.pred_var)]
            for r in records]
    pd.DataFrame(rows, columns=PRED_COLUMNS, dtype=str).to_csv(path, index=False)
    logger.info(f"Wrote {len(rows)} predictions to {path}")


def read_predictions(path: str) -> List[PredictionRecord]:
    """Read preds.csv or an external baseline CSV of the same schema (pred_var optional)"""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    require_columns(df.columns, [c for c in PRED_COLUMNS if c != "pred_var"], source=str(path))
    has_var = "pred_var" in df.columns
    records = []
    for row in df.to_dict("records"):
        var_text = row["pred_var"] if has_var else ""
        records.append(PredictionRecord(
            veh_id=row["veh_id"],
            trip_id=row["trip_id"],
            start_datetime=datetime.fromisoformat(row["start_iso"]),
            month=int(row["month"]),
            task=Task(row["task"]),
            target=float(row["target"]) if row["target"] != "" else None,
            pred_mean=float(row["pred_mean"]),
            pred_var=float(var_text) if var_text != "" else None,
        ))
    return records
