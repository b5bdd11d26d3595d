"""
Feature Engineering Module
Time encodings, speed statistics, temperature and origin-destination clusters per trip,
plus the month-stratified split and the training-set standardizer
"""

import math
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

import config
from energy_labels import TripEnergy
from logger_config import get_logger
from validation import InsufficientDataError, check_feature_alignment
from ved_ingest import TripSeries, VehicleType, format_cell

logger = get_logger("Features")

T = TypeVar("T")


class Task(str, Enum):
    FUEL = "fuel"
    BATTERY = "battery"


# Report column order: fuel tasks then battery tasks
TASKS: Tuple[Tuple[VehicleType, Task], ...] = (
    (VehicleType.ICE, Task.FUEL),
    (VehicleType.PHEV, Task.FUEL),
    (VehicleType.HEV, Task.FUEL),
    (VehicleType.HEV, Task.BATTERY),
    (VehicleType.PHEV, Task.BATTERY),
    (VehicleType.EV, Task.BATTERY),
)


def task_label(vehicle_type: VehicleType, task: Task) -> str:
    """Directory / report key for one task, e.g. 'ICE_fuel'"""
    return f"{vehicle_type.value}_{task.value}"


TIME_FEATURES = ("hour_sin", "hour_cos", "minute_sin", "minute_cos",
                 "dow_sin", "dow_cos", "month_sin", "month_cos")
TRIP_FEATURES = ("duration_s", "speed_mean", "speed_std", "speed_min", "speed_max",
                 "speed_median", "oat_mean")
CLUSTER_PREFIX = "cluster_"
META_COLUMNS = ("veh_id", "trip_id", "vehicle_type", "task", "month", "target", "start_iso")


def feature_names(k: int) -> Tuple[str, ...]:
    """Canonical feature order; written into every model so predict-time vectors align"""
    return TIME_FEATURES + TRIP_FEATURES + tuple(f"{CLUSTER_PREFIX}{i}" for i in range(k))


@dataclass(frozen=True)
class LabeledTrip:
    veh_id: str
    trip_id: str
    vehicle_type: VehicleType
    task: Task
    month: int
    start_datetime: datetime
    target: float
    features: Tuple[float, ...]
    feature_names: Tuple[str, ...]


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray
    seed: int
    inertia_history: Tuple[float, ...] = ()


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-scoring fitted on the training split"""
    feature_names: Tuple[str, ...]
    kept: Tuple[str, ...]
    mean: Tuple[float, ...]
    scale: Tuple[float, ...]
    passthrough: Tuple[str, ...] = ()
    dropped: Tuple[str, ...] = ()


@dataclass(frozen=True)
class TargetScaling:
    """z-scoring of the regression target; networks train and predict in z units"""
    mean: float = 0.0
    scale: float = 1.0

    def apply(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.mean) / self.scale

    def invert(self, mean: np.ndarray, variance: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Map a predicted (mean, variance) back to target units"""
        return mean * self.scale + self.mean, variance * self.scale ** 2


def _cyclic(value: float, period: float) -> Tuple[float, float]:
    angle = 2 * math.pi * value / period
    return math.sin(angle), math.cos(angle)


def time_features(start: datetime) -> Dict[str, float]:
    """Raw calendar fields plus sin/cos encodings (day_of_week: Monday = 0)"""
    hour_sin, hour_cos = _cyclic(start.hour, 24)
    minute_sin, minute_cos = _cyclic(start.minute, 60)
    dow_sin, dow_cos = _cyclic(start.weekday(), 7)
    month_sin, month_cos = _cyclic(start.month, 12)
    return {
        "hour": start.hour,
        "minute": start.minute,
        "day_of_week": start.weekday(),
        "month": start.month,
        "hour_sin": hour_sin, "hour_cos": hour_cos,
        "minute_sin": minute_sin, "minute_cos": minute_cos,
        "dow_sin": dow_sin, "dow_cos": dow_cos,
        "month_sin": month_sin, "month_cos": month_cos,
    }


def speed_features(trip: TripSeries) -> Optional[Dict[str, float]]:
    """Descriptive speed statistics (population std) and duration; None without speed samples"""
    speeds = np.array([s.speed for s in trip.samples if s.speed is not None], dtype=float)
    if speeds.size == 0:
        return None
    return {
        "speed_mean": float(np.mean(speeds)),
        "speed_std": float(np.std(speeds)),
        "speed_min": float(np.min(speeds)),
        "speed_max": float(np.max(speeds)),
        "speed_median": float(np.median(speeds)),
        "duration_s": trip.duration_s,
    }


def mean_oat(trip: TripSeries) -> Optional[float]:
    temps = [s.oat for s in trip.samples if s.oat is not None]
    return float(np.mean(temps)) if temps else None


def od_vector(trip: TripSeries) -> np.ndarray:
    """(origin_lat, origin_lon, dest_lat, dest_lon) from the first/last GPS fix"""
    fixes = [s for s in trip.samples if s.lat is not None and s.lon is not None]
    if not fixes:
        logger.debug(f"Trip {trip.key} has no GPS fix; OD vector set to zeros")
        return np.zeros(4)
    return np.array([fixes[0].lat, fixes[0].lon, fixes[-1].lat, fixes[-1].lon], dtype=float)


def od_matrix(trips: Sequence[TripSeries]) -> np.ndarray:
    return np.array([od_vector(t) for t in trips], dtype=float).reshape(-1, 4)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = [X[rng.integers(n)]]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        idx = rng.choice(n, p=d2 / d2.sum())
        centroids.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centroids, dtype=float)


def fit_od_clusters(trips: Union[Sequence[TripSeries], np.ndarray], k: int = config.OD_CLUSTERS,
                    seed: int = config.SEED, max_iter: int = config.KMEANS_MAX_ITER) -> ClusterModel:
    """
    k-means with k-means++ seeding on 4-d origin-destination vectors

    Iterates until the assignment stops changing or max_iter is reached.
    Inertia must never increase between iterations.

    Raises:
        InsufficientDataError: fewer distinct OD vectors than k
    """
    X = trips if isinstance(trips, np.ndarray) else od_matrix(trips)
    X = np.asarray(X, dtype=float).reshape(-1, 4)
    distinct = np.unique(X, axis=0).shape[0] if X.size else 0
    if k < 1 or distinct < k:
        raise InsufficientDataError(
            f"Only {distinct} distinct origin-destination points for k={k}; use a smaller --clusters")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(X, k, rng)
    labels = None
    history: List[float] = []

    for iteration in range(max_iter):
        distances = cdist(X, centroids, "sqeuclidean")
        assignment = distances.argmin(axis=1)
        if labels is not None and np.array_equal(assignment, labels):
            break
        labels = assignment
        for j in range(k):
            members = X[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        inertia = float(((X - centroids[labels]) ** 2).sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"k-means inertia increased at iteration {iteration}: "
                               f"{history[-1]} -> {inertia}")
        history.append(inertia)

    logger.info(f"OD clustering: k={k}, {len(history)} iterations, inertia {history[-1]:.6g}")
    return ClusterModel(k=k, centroids=centroids, seed=seed, inertia_history=tuple(history))


def assign_cluster(model: ClusterModel, trip: Union[TripSeries, np.ndarray]) -> int:
    """Nearest centroid by Euclidean distance; ties go to the lowest id"""
    point = od_vector(trip) if isinstance(trip, TripSeries) else np.asarray(trip, dtype=float)
    distances = cdist(point.reshape(1, 4), model.centroids).ravel()
    return int(np.argmin(distances))


def one_hot(cluster_id: int, k: int) -> Tuple[float, ...]:
    block = [0.0] * k
    block[cluster_id] = 1.0
    return tuple(block)


def stratified_split(items: Sequence[T], train_frac: float = config.TRAIN_FRAC, seed: int = config.SEED,
                     month_of: Callable[[T], int] = lambda item: item.month) -> Tuple[List[T], List[T]]:
    """
    Month-stratified train/test split

    Each month is shuffled with the seed and train_frac * n rounded half up of it goes to
    training, keeping at least one trip on each side when the month has two or more.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    rng = np.random.default_rng(seed)
    strata: Dict[int, List[int]] = {}
    for idx, item in enumerate(items):
        strata.setdefault(month_of(item), []).append(idx)

    train_idx, test_idx = [], []
    for month in sorted(strata):
        members = np.array(strata[month])
        n = len(members)
        shuffled = members[rng.permutation(n)]
        n_train = 1 if n == 1 else min(max(math.floor(train_frac * n + 0.5), 1), n - 1)
        train_idx.extend(shuffled[:n_train].tolist())
        test_idx.extend(shuffled[n_train:].tolist())

    return [items[i] for i in sorted(train_idx)], [items[i] for i in sorted(test_idx)]


def fit_standardizer(X: np.ndarray, names: Sequence[str],
                     passthrough_prefix: str = CLUSTER_PREFIX) -> Standardizer:
    """Fit mean/std on training features; constant columns are dropped, one-hot columns pass through"""
    X = np.asarray(X, dtype=float)
    kept, means, scales, passthrough, dropped = [], [], [], [], []
    for j, name in enumerate(names):
        if name.startswith(passthrough_prefix):
            kept.append(name)
            means.append(0.0)
            scales.append(1.0)
            passthrough.append(name)
            continue
        column = X[:, j]
        mean = float(np.mean(column)) if column.size else 0.0
        std = float(np.std(column)) if column.size else 0.0
        if std <= 1e-12 * max(1.0, abs(mean)):
            dropped.append(name)
            continue
        kept.append(name)
        means.append(mean)
        scales.append(std)
    if dropped:
        logger.info(f"Dropped constant features: {', '.join(dropped)}")
    return Standardizer(feature_names=tuple(names), kept=tuple(kept), mean=tuple(means),
                        scale=tuple(scales), passthrough=tuple(passthrough), dropped=tuple(dropped))


def fit_target_scaling(y: np.ndarray) -> TargetScaling:
    """Mean/std of the training targets; a constant target keeps scale 1"""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        return TargetScaling()
    mean = float(np.mean(y))
    std = float(np.std(y))
    if not std > 1e-12 * max(1.0, abs(mean)):
        std = 1.0
    return TargetScaling(mean=mean, scale=std)


def apply_standardizer(std: Standardizer, X: np.ndarray, names: Sequence[str]) -> np.ndarray:
    """z = (x - mean) / std using the training statistics, restricted to kept columns"""
    check_feature_alignment(std.feature_names, names)
    X = np.asarray(X, dtype=float).reshape(-1, len(names))
    index = {name: j for j, name in enumerate(names)}
    cols = [index[name] for name in std.kept]
    return (X[:, cols] - np.array(std.mean)) / np.array(std.scale)


def feature_matrix(rows: Sequence[LabeledTrip]) -> Tuple[np.ndarray, np.ndarray, Tuple[str, ...]]:
    """(X, y, feature_names) for a homogeneous list of labeled trips"""
    if not rows:
        return np.zeros((0, 0)), np.zeros(0), ()
    names = rows[0].feature_names
    for row in rows:
        check_feature_alignment(names, row.feature_names)
    X = np.array([row.features for row in rows], dtype=float)
    y = np.array([row.target for row in rows], dtype=float)
    return X, y, names


def build_labeled_trips(trips: Sequence[TripSeries], energies: Mapping, cluster_model: ClusterModel) -> List[LabeledTrip]:
    """
    Feature vectors for every labeled trip and every task it has a target for

    Args:
        trips: assembled trips
        energies: (veh_id, trip_id) -> TripEnergy
        cluster_model: fitted OD clusters

    Returns:
        LabeledTrip rows, fuel before battery for a trip carrying both
    """
    names = feature_names(cluster_model.k)
    candidates = []
    for trip in trips:
        energy: Optional[TripEnergy] = energies.get(trip.key)
        if energy is None or energy.rejected:
            continue
        speed = speed_features(trip)
        if speed is None:
            continue
        candidates.append((trip, energy, speed, mean_oat(trip)))

    temps = [c[3] for c in candidates if c[3] is not None]
    oat_fill = float(np.median(temps)) if temps else 0.0
    if len(temps) < len(candidates):
        logger.info(f"Imputed mean OAT {oat_fill:.2f} degC for {len(candidates) - len(temps)} trips")

    rows: List[LabeledTrip] = []
    for trip, energy, speed, oat in candidates:
        calendar = time_features(trip.start_datetime)
        values = dict(calendar)
        values.update(speed)
        values["oat_mean"] = oat if oat is not None else oat_fill
        vector = tuple(float(values[n]) for n in TIME_FEATURES + TRIP_FEATURES)
        vector += one_hot(assign_cluster(cluster_model, trip), cluster_model.k)
        targets = ((Task.FUEL, energy.fuel_eff_km_per_l), (Task.BATTERY, energy.batt_eff_km_per_kwh))
        for task, target in targets:
            if target is None:
                continue
            rows.append(LabeledTrip(
                veh_id=trip.veh_id, trip_id=trip.trip_id, vehicle_type=trip.meta.vehicle_type,
                task=task, month=calendar["month"], start_datetime=trip.start_datetime,
                target=float(target), features=vector, feature_names=names,
            ))
    logger.info(f"Built {len(rows)} labeled feature rows from {len(candidates)} trips")
    return rows


def select_task(rows: Sequence[LabeledTrip], vehicle_type: VehicleType, task: Task) -> List[LabeledTrip]:
    return [r for r in rows if r.vehicle_type == vehicle_type and r.task == task]


def write_features(rows: Sequence[LabeledTrip], path: str, names: Optional[Sequence[str]] = None) -> None:
    names = tuple(names) if names is not None else (rows[0].feature_names if rows else ())
    records = []
    for r in rows:
        check_feature_alignment(names, r.feature_names)
        records.append([r.veh_id, r.trip_id, r.vehicle_type.value, r.task.value, str(r.month),
                        format_cell(r.target), r.start_datetime.isoformat()]
                       + [format_cell(v) for v in r.features])
    pd.DataFrame(records, columns=list(META_COLUMNS) + list(names), dtype=str).to_csv(path, index=False)
    logger.info(f"Wrote {len(records)} feature rows to {path}")


def read_features(path: str) -> List[LabeledTrip]:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    names = tuple(c for c in df.columns if c not in META_COLUMNS)
    rows = []
    for record in df.to_dict("records"):
        rows.append(LabeledTrip(
            veh_id=record["veh_id"],
            trip_id=record["trip_id"],
            vehicle_type=VehicleType(record["vehicle_type"]),
            task=Task(record["task"]),
            month=int(record["month"]),
            start_datetime=datetime.fromisoformat(record["start_iso"]),
            target=float(record["target"]),
            features=tuple(float(record[n]) for n in names),
            feature_names=names,
        ))
    return rows


def write_clusters(model: ClusterModel, path: str) -> None:
    rows = [[str(i)] + [format_cell(float(v)) for v in model.centroids[i]] for i in range(model.k)]
    df = pd.DataFrame(rows, columns=["cluster", "origin_lat", "origin_lon", "dest_lat", "dest_lon"], dtype=str)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# k={model.k},seed={model.seed}\n")
        df.to_csv(handle, index=False)


def read_clusters(path: str) -> ClusterModel:
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().lstrip("#").strip()
    params = dict(part.split("=", 1) for part in header.split(","))
    df = pd.read_csv(path, skiprows=1, dtype=str)
    cells = df[["origin_lat", "origin_lon", "dest_lat", "dest_lon"]].to_numpy()
    centroids = np.array([[float(v) for v in row] for row in cells], dtype=float).reshape(-1, 4)
    return ClusterModel(k=int(params["k"]), centroids=centroids, seed=int(params["seed"]))
