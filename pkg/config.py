"""
Configuration module - every tunable of the pipeline in one place
Module constants are the defaults; RunConfig layers a key=value file and CLI flags on top
"""

import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Tuple

# ============== DATASET ==============
VED_EPOCH_DATE = "2017-11-01"

# Published VED dynamic header names, keyed by SamplePoint field
DYNAMIC_COLUMN_MAP = {
    "day_num": "DayNum",
    "veh_id": "VehId",
    "trip_id": "Trip",
    "timestamp_ms": "Timestamp(ms)",
    "lat": "Latitude[deg]",
    "lon": "Longitude[deg]",
    "speed": "Vehicle Speed[km/h]",
    "maf": "MAF[g/sec]",
    "engine_rpm": "Engine RPM[RPM]",
    "abs_load": "Absolute Load[%]",
    "oat": "OAT[DegC]",
    "fuel_rate": "Fuel Rate[L/hr]",
    "hv_current": "HV Battery Current[A]",
    "hv_voltage": "HV Battery Voltage[V]",
    "stft_b1": "Short Term Fuel Trim Bank 1[%]",
    "stft_b2": "Short Term Fuel Trim Bank 2[%]",
    "ltft_b1": "Long Term Fuel Trim Bank 1[%]",
    "ltft_b2": "Long Term Fuel Trim Bank 2[%]",
}

# Published VED static header names, keyed by VehicleMeta field
STATIC_COLUMN_MAP = {
    "veh_id": "VehId",
    "vehicle_type": "Vehicle Type",
    "vehicle_class": "Vehicle Class",
    "engine_config": "Engine Configuration & Displacement",
    "displacement": "Engine Displacement",  # optional, parsed from engine_config when absent
    "transmission": "Transmission",
    "drive_wheels": "Drive Wheels",
    "weight": "Generalized_Weight",
}

MISSING_TOKENS = ("", "NO DATA", "NAN", "NA", "NULL", "NONE")

# ============== FUEL CONSUMPTION ESTIMATION ==============
AFR = 14.7                   # stoichiometric gasoline air-fuel ratio
RHO_AIR_G_PER_L = 1.225      # sea level, 15 degC
FUEL_DENSITY_G_PER_L = 745.0 # gasoline
FCR_MIN_COVERAGE = 0.5       # share of samples that must yield a fuel rate
BATTERY_SIGN = 1.0           # +1: positive current means discharge

# ============== LABEL FILTERS ==============
MIN_DURATION_S = 60.0
MIN_DISTANCE_KM = 0.5
MAX_FUEL_EFF = 50.0          # km/L
MAX_BATT_EFF = 20.0          # km/kWh

# ============== FEATURES ==============
OD_CLUSTERS = 8
KMEANS_MAX_ITER = 100
TRAIN_FRAC = 0.7

# ============== NETWORK ==============
HIDDEN_WIDTHS = (64, 64, 32, 16)
VARIANCE_FLOOR = 1e-6
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# ============== ENSEMBLE ==============
MEMBERS = 10
EPOCHS = 10
BATCH_SIZE = 500
LEARNING_RATE = 0.1
ADV_EPS = 0.01
SEED = 0
LR_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
GRID_EPOCHS = 3
GRID_TRAIN_FRAC = 0.9
MIN_TASK_TRIPS = 10          # tasks with fewer labeled trips are skipped

# ============== BASELINES ==============
RIDGE_EPS = 1e-8

# ============== EVALUATION ==============
COVERAGE_LEVEL = 0.95
WILCOXON_EXACT_MAX_N = 12
SIGNIFICANCE_LEVEL = 0.05

# ============== SYNTHETIC DATA ==============
SYNTH_VEHICLES = {"ICE": 6, "HEV": 3, "PHEV": 2, "EV": 2}
SYNTH_DAYS = 365
SYNTH_TRIPS_PER_DAY = 0.45   # per vehicle
SYNTH_MIN_TRIP_S = 180
SYNTH_MAX_TRIP_S = 600
# km/L noise standard deviation per calendar month (Jan..Dec); winter is noisier
SYNTH_NOISE_BY_MONTH = (1.6, 0.5, 0.5, 0.5, 0.5, 0.5, 0.9, 0.9, 0.5, 0.5, 1.6, 1.6)

# ============== FILE NAMES ==============
RAW_DIR = "raw"
STATIC_FILE = "static.csv"
TRUTH_FILE = "truth.csv"
TRIPS_FILE = "trips.csv"
VEHICLES_FILE = "vehicles.csv"
LABELED_FILE = "labeled.csv"
LABEL_REPORT_FILE = "label_report.json"
FEATURES_FILE = "features.csv"
CLUSTERS_FILE = "clusters.csv"
OD_FILE = "od.csv"
TRAIN_FILE = "train.csv"
TEST_FILE = "test.csv"
MODELS_DIR = "models"
PREDS_DIR = "preds"
EVAL_DIR = "eval"
FIGURES_DIR = "figures"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
RUN_CONFIG_FILE = "run_config.txt"
INGEST_SUMMARY_FILE = "ingest_summary.json"
GRIDSEARCH_FILE = "gridsearch.json"

# ============== ENVIRONMENT ==============
THREADS_ENV_VAR = "EFFIQ_THREADS"
LOG_DIR_ENV_VAR = "EFFIQ_LOG_DIR"

# ============== VALIDATION CONSTRAINTS ==============
LAT_MIN = -90.0
LAT_MAX = 90.0
LON_MIN = -180.0
LON_MAX = 180.0


def threads_from_env() -> int:
    """Member/file concurrency cap from EFFIQ_THREADS (default 1 = sequential)"""
    raw = os.environ.get(THREADS_ENV_VAR, "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RunConfig:
    """Fully materialized configuration for one pipeline run"""

    out: str = "effiq_run"
    seed: int = SEED
    epoch_date: str = VED_EPOCH_DATE
    vehicle_type: Optional[str] = None
    energy: Optional[str] = None
    # fuel estimation
    afr: float = AFR
    rho_air: float = RHO_AIR_G_PER_L
    fuel_density: float = FUEL_DENSITY_G_PER_L
    fcr_min_coverage: float = FCR_MIN_COVERAGE
    battery_sign: float = BATTERY_SIGN
    # label filters
    min_duration_s: float = MIN_DURATION_S
    min_distance_km: float = MIN_DISTANCE_KM
    max_fuel_eff: float = MAX_FUEL_EFF
    max_batt_eff: float = MAX_BATT_EFF
    # features
    clusters: int = OD_CLUSTERS
    kmeans_max_iter: int = KMEANS_MAX_ITER
    train_frac: float = TRAIN_FRAC
    # network / ensemble
    hidden_widths: Tuple[int, ...] = HIDDEN_WIDTHS
    members: int = MEMBERS
    epochs: int = EPOCHS
    batch: int = BATCH_SIZE
    lr: float = LEARNING_RATE
    adv_eps: float = ADV_EPS
    lr_grid: Tuple[float, ...] = LR_GRID
    grid_epochs: int = GRID_EPOCHS
    grid_train_frac: float = GRID_TRAIN_FRAC
    min_task_trips: int = MIN_TASK_TRIPS
    ridge_eps: float = RIDGE_EPS
    # evaluation
    coverage_level: float = COVERAGE_LEVEL
    wilcoxon_exact_max_n: int = WILCOXON_EXACT_MAX_N
    # synthetic data
    synth_days: int = SYNTH_DAYS
    synth_trips_per_day: float = SYNTH_TRIPS_PER_DAY
    synth_noise_scale: float = 1.0
    threads: int = field(default_factory=threads_from_env)

    def to_text(self) -> str:
        """Deterministic key=value snapshot, readable back by load_config_file"""
        lines = ["# EffIQ resolved run configuration"]
        for f in fields(self):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: Mapping[str, object]) -> "RunConfig":
        """Return a copy with coerced overrides applied (None values ignored)"""
        known = {f.name: f for f in fields(self)}
        coerced = {}
        for key, value in overrides.items():
            name = key.replace("-", "_")
            if name not in known:
                raise KeyError(f"Unknown configuration key '{key}'")
            if value is None:
                continue
            coerced[name] = _coerce(name, value, getattr(self, name))
        return replace(self, **coerced)


_OPTIONAL_TEXT = {"vehicle_type", "energy"}


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, value, current):
    if not isinstance(value, str):
        if isinstance(current, tuple) and isinstance(value, list):
            return tuple(value)
        return value
    text = value.strip()
    if name in _OPTIONAL_TEXT:
        return text or None
    if isinstance(current, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        cast = int if name == "hidden_widths" else float
        return tuple(cast(p) for p in parts)
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def load_config_file(path: str) -> Dict[str, str]:
    """
    Read a flat key=value configuration file

    Blank lines and lines starting with '#' are ignored.

    Returns:
        Dict of raw string values keyed as written
    """
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key=value, got '{stripped}'")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_run_config(config_file: Optional[str] = None,
                       flags: Optional[Mapping[str, object]] = None) -> RunConfig:
    """Merge defaults < config file < command-line flags"""
    resolved = RunConfig()
    if config_file:
        resolved = resolved.with_overrides(load_config_file(config_file))
    if flags:
        resolved = resolved.with_overrides(flags)
    return resolved


def config_keys() -> List[str]:
    return [f.name for f in fields(RunConfig)]
