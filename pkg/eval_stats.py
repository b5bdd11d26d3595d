"""
Evaluation Statistics Module
RMSE, R2, per-month aggregation, interval coverage and the one-tailed Wilcoxon
signed-rank test, assembled into the per-task evaluation report
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

import config
from energy_labels import fuel_efficiency_units
from ensemble import PredictionRecord
from featurize import TASKS, Task, task_label
from logger_config import get_logger
from validation import IdenticalModelsError, ValidationError
from ved_ingest import VehicleType

logger = get_logger("Evaluation")

REFERENCE_MODEL = "ENN"
RMSE_BASIS = "mean and population std across the monthly RMSE values of the test set"
NLL_CONVENTION = "Gaussian NLL without the additive log(2*pi)/2 constant"


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    w_plus: float
    w_minus: float
    method: str


@dataclass(frozen=True)
class MonthStats:
    month: int
    n: int
    mean_pred: float
    mean_var: Optional[float]
    rmse: float
    mean_target: float


@dataclass(frozen=True)
class MonthlyReport:
    months: Tuple[MonthStats, ...]
    rmse_mean: float
    rmse_std: float
    missing_months: Tuple[int, ...]


@dataclass(frozen=True)
class ModelScores:
    n: int
    rmse: float
    r2: Optional[float]
    monthly: MonthlyReport
    coverage: Optional[float] = None
    nll: Optional[float] = None


@dataclass
class TaskReport:
    """EvalReport fragment for one (vehicle type, energy) task"""
    vehicle_type: VehicleType
    task: Task
    n_test: int
    models: Dict[str, ModelScores] = field(default_factory=dict)
    wilcoxon: Dict[str, Optional[WilcoxonResult]] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=dict)
    units: Optional[Dict[str, float]] = None

    @property
    def label(self) -> str:
        return task_label(self.vehicle_type, self.task)

    def to_dict(self) -> Dict:
        return {
            "vehicle_type": self.vehicle_type.value,
            "task": self.task.value,
            "n_test": self.n_test,
            "models": {name: asdict(scores) for name, scores in self.models.items()},
            "wilcoxon": {pair: (asdict(result) if result else None) for pair, result in self.wilcoxon.items()},
            "notes": dict(self.notes),
            "units": self.units,
        }


def _paired_arrays(preds, targets) -> Tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=float).reshape(-1)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if preds.size != targets.size:
        raise ValidationError(f"Length mismatch: {preds.size} predictions for {targets.size} targets")
    if preds.size == 0:
        raise ValidationError("Cannot score an empty prediction set")
    return preds, targets


def rmse(preds, targets) -> float:
    preds, targets = _paired_arrays(preds, targets)
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def r2(preds, targets) -> Optional[float]:
    """Coefficient of determination; None when the targets have no variance"""
    preds, targets = _paired_arrays(preds, targets)
    total = float(np.sum((targets - targets.mean()) ** 2))
    if total == 0.0:
        return None
    return 1.0 - float(np.sum((targets - preds) ** 2)) / total


def coverage(means, variances, targets, level: float = config.COVERAGE_LEVEL) -> float:
    """Share of targets inside mean +- z(level) * sigma"""
    if not 0.0 < level < 1.0:
        raise ValidationError(f"Coverage level must lie in (0, 1), got {level}")
    means, targets = _paired_arrays(means, targets)
    sigma = np.sqrt(np.asarray(variances, dtype=float).reshape(-1))
    z = norm.ppf(0.5 + level / 2)
    return float(np.mean(np.abs(targets - means) <= z * sigma))


def exact_upper_tail(ranks: np.ndarray, observed: float) -> float:
    """P(W >= observed) with W the rank sum of a random sign assignment, by enumerating all 2^n"""
    n = ranks.size
    signs = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    sums = signs @ ranks
    return float(np.count_nonzero(sums >= observed)) / 2 ** n


def normal_upper_tail(ranks: np.ndarray, observed: float) -> float:
    """Normal approximation of P(W >= observed) with tie and continuity corrections"""
    n = ranks.size
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48
    if var <= 0:
        return 1.0
    z = (observed - mean - 0.5) / math.sqrt(var)
    return float(min(1.0, max(norm.sf(z), np.finfo(float).tiny)))


def wilcoxon_one_tailed(errors_a, errors_b, method: str = "auto",
                        exact_max_n: int = config.WILCOXON_EXACT_MAX_N) -> WilcoxonResult:
    """
    One-tailed Wilcoxon signed-rank test of "model A has smaller errors than B"

    Zero differences are dropped and |d| ranked with average ranks for ties. The
    p-value is the upper tail of W- (rank sum of the differences favoring A).

    Args:
        method: "exact", "normal" or "auto" (exact when n <= exact_max_n)

    Raises:
        IdenticalModelsError: every paired difference is zero
    """
    a, b = _paired_arrays(errors_a, errors_b)
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        raise IdenticalModelsError()
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())

    if method == "auto":
        method = "exact" if d.size <= exact_max_n else "normal"
    if method == "exact":
        p = exact_upper_tail(ranks, w_minus)
    elif method == "normal":
        p = normal_upper_tail(ranks, w_minus)
    else:
        raise ValidationError(f"Unknown Wilcoxon method '{method}'")
    return WilcoxonResult(statistic=min(w_plus, w_minus), p_value=p, n=int(d.size),
                          w_plus=w_plus, w_minus=w_minus, method=method)


def monthly_report(records: Sequence[PredictionRecord]) -> MonthlyReport:
    """Per-month mean prediction, mean variance and RMSE; months without test trips are listed"""
    by_month: Dict[int, List[PredictionRecord]] = {}
    for record in records:
        by_month.setdefault(record.month, []).append(record)

    months = []
    for month in sorted(by_month):
        group = by_month[month]
        preds = np.array([r.pred_mean for r in group], dtype=float)
        targets = np.array([r.target for r in group], dtype=float)
        variances = [r.pred_var for r in group if r.pred_var is not None]
        months.append(MonthStats(
            month=month,
            n=len(group),
            mean_pred=float(preds.mean()),
            mean_var=float(np.mean(variances)) if len(variances) == len(group) else None,
            rmse=rmse(preds, targets),
            mean_target=float(targets.mean()),
        ))

    values = np.array([m.rmse for m in months], dtype=float)
    missing = tuple(m for m in range(1, 13) if m not in by_month)
    if missing:
        logger.debug(f"Months without test trips: {list(missing)}")
    return MonthlyReport(
        months=tuple(months),
        rmse_mean=float(values.mean()) if values.size else float("nan"),
        rmse_std=float(values.std()) if values.size else float("nan"),
        missing_months=missing,
    )


def _gaussian_nll(means: np.ndarray, variances: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(0.5 * np.log(variances) + (targets - means) ** 2 / (2 * variances)))


def score_model(records: Sequence[PredictionRecord], level: float = config.COVERAGE_LEVEL) -> ModelScores:
    preds = np.array([r.pred_mean for r in records], dtype=float)
    targets = np.array([r.target for r in records], dtype=float)
    has_var = bool(records) and all(r.pred_var is not None for r in records)
    scores = dict(n=len(records), rmse=rmse(preds, targets), r2=r2(preds, targets),
                  monthly=monthly_report(records))
    if has_var:
        variances = np.array([r.pred_var for r in records], dtype=float)
        scores["coverage"] = coverage(preds, variances, targets, level)
        scores["nll"] = _gaussian_nll(preds, variances, targets)
    return ModelScores(**scores)


def _align(reference: Sequence[PredictionRecord], other: Sequence[PredictionRecord],
           name: str) -> List[Tuple[PredictionRecord, PredictionRecord]]:
    """Pair records by (veh_id, trip_id) in reference order; targets come from the reference"""
    lookup = {r.key: r for r in other}
    pairs = [(ref, lookup[ref.key]) for ref in reference if ref.key in lookup]
    if len(pairs) < len(reference):
        logger.warning(f"{name}: {len(reference) - len(pairs)} test trips have no prediction")
    return pairs


def evaluate_task(predictions: Mapping[str, Sequence[PredictionRecord]], vehicle_type: VehicleType,
                  task: Task, reference: str = REFERENCE_MODEL,
                  level: float = config.COVERAGE_LEVEL,
                  exact_max_n: int = config.WILCOXON_EXACT_MAX_N) -> TaskReport:
    """
    Score every model on the reference model's test trips and test the reference against each

    Args:
        predictions: model name -> prediction records; must contain `reference`
    """
    if reference not in predictions:
        raise ValidationError(f"No '{reference}' predictions to evaluate {task_label(vehicle_type, task)}")
    ref_records = [r for r in predictions[reference] if r.target is not None]
    report = TaskReport(vehicle_type=vehicle_type, task=task, n_test=len(ref_records),
                        notes={"rmse_mean_std": RMSE_BASIS, "nll": NLL_CONVENTION,
                               "wilcoxon": f"one-tailed, H_a: {reference} has smaller absolute errors"})
    report.models[reference] = score_model(ref_records, level)

    for name, records in predictions.items():
        if name == reference:
            continue
        pairs = _align(ref_records, records, name)
        if not pairs:
            logger.warning(f"{name}: no predictions overlap the {report.label} test set; skipped")
            continue
        aligned = [PredictionRecord(veh_id=o.veh_id, trip_id=o.trip_id, start_datetime=ref.start_datetime,
                                    month=ref.month, task=ref.task, target=ref.target,
                                    pred_mean=o.pred_mean, pred_var=o.pred_var) for ref, o in pairs]
        report.models[name] = score_model(aligned, level)
        errors_ref = np.array([abs(ref.pred_mean - ref.target) for ref, _ in pairs])
        errors_other = np.array([abs(o.pred_mean - ref.target) for ref, o in pairs])
        pair = f"{reference}-{name}"
        try:
            report.wilcoxon[pair] = wilcoxon_one_tailed(errors_ref, errors_other, exact_max_n=exact_max_n)
        except IdenticalModelsError as e:
            report.wilcoxon[pair] = None
            report.notes[pair] = str(e)

    if task is Task.FUEL and ref_records:
        report.units = fuel_efficiency_units(float(np.mean([r.target for r in ref_records])))
    ref_scores = report.models[reference]
    logger.info(f"{report.label}: {reference} RMSE {ref_scores.rmse:.4f} on {report.n_test} trips, "
                f"coverage {ref_scores.coverage}")
    return report


def _fmt(value: Optional[float], digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.{digits}f}"


def report_table(reports: Sequence[TaskReport]) -> pd.DataFrame:
    """Flat table: rows = (table, model), columns = tasks in report order"""
    ordered = sorted(reports, key=lambda r: TASKS.index((r.vehicle_type, r.task)))
    labels = [r.label for r in ordered]
    models: List[str] = []
    pairs: List[str] = []
    for r in ordered:
        models.extend(m for m in r.models if m not in models)
        pairs.extend(p for p in r.wilcoxon if p not in pairs)

    rows = []
    for model in models:
        cells = []
        for r in ordered:
            s = r.models.get(model)
            cells.append(f"{_fmt(s.monthly.rmse_mean, 2)} ± {_fmt(s.monthly.rmse_std, 2)}" if s else "")
        rows.append(["rmse", model] + cells)
    for model in models:
        rows.append(["r2", model] + [_fmt(r.models[model].r2, 3) if model in r.models else "" for r in ordered])
    for model in models:
        cells = [_fmt(r.models[model].coverage, 3) if model in r.models else "" for r in ordered]
        if any(cells):
            rows.append(["coverage", model] + cells)
    for pair in pairs:
        cells = []
        for r in ordered:
            result = r.wilcoxon.get(pair)
            cells.append(_fmt(result.p_value, 4) if result else r.notes.get(pair, ""))
        rows.append(["p_value", pair] + cells)
    return pd.DataFrame(rows, columns=["table", "model"] + labels, dtype=str)


def write_report(reports: Sequence[TaskReport], out_dir: str,
                 extras: Optional[Mapping[str, object]] = None) -> Tuple[str, str]:
    """Write report.json (nested) and report.csv (flat table); returns both paths"""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, config.REPORT_JSON)
    csv_path = os.path.join(out_dir, config.REPORT_CSV)
    document = {
        "rmse_mean_std": RMSE_BASIS,
        "nll": NLL_CONVENTION,
        "significance_level": config.SIGNIFICANCE_LEVEL,
        "tasks": {r.label: r.to_dict() for r in reports},
    }
    if extras:
        document.update(extras)
    with open(json_path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(document, handle, indent=2, sort_keys=True, ensure_ascii=False)
        handle.write("\n")
    report_table(reports).to_csv(csv_path, index=False)
    logger.info(f"Wrote evaluation report for {len(reports)} task(s) to {out_dir}")
    return json_path, csv_path


def read_report(path: str) -> Dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
