"""
Synthetic Data Module
Deterministic VED-format telemetry with planted efficiency functions and a ground-truth sidecar
"""

import math
import os
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

import config
from logger_config import get_logger
from validation import ValidationError
from ved_ingest import VehicleType, as_epoch, format_cell

logger = get_logger("Synth")

TRUTH_COLUMNS = ["veh_id", "trip_id", "true_fuel_eff", "true_batt_eff"]

SPEED_CAP_KMH = 120.0
CENTER_LAT, CENTER_LON = 42.2808, -83.7430  # Ann Arbor
ANCHOR_SPREAD_DEG = 0.05
OD_JITTER_DEG = 0.002
ECO_OAT_C = 20.0

DISPLACEMENT_L = {VehicleType.ICE: 2.0, VehicleType.HEV: 1.8, VehicleType.PHEV: 2.0}
NOMINAL_VOLTAGE = {VehicleType.HEV: 250.0, VehicleType.PHEV: 320.0, VehicleType.EV: 360.0}
VEHICLE_CLASS = "Car"
WEIGHT_LB = {VehicleType.ICE: "3,000lb", VehicleType.HEV: "3,500lb", VehicleType.PHEV: "3,500lb",
             VehicleType.EV: "4,000lb"}


@dataclass(frozen=True)
class SynthConfig:
    """Fleet size, calendar span and the planted efficiency function"""
    vehicles: Mapping[str, int] = field(default_factory=lambda: dict(config.SYNTH_VEHICLES))
    days: int = config.SYNTH_DAYS
    trips_per_day: float = config.SYNTH_TRIPS_PER_DAY
    seed: int = config.SEED
    epoch_date: str = config.VED_EPOCH_DATE
    min_trip_s: int = config.SYNTH_MIN_TRIP_S
    max_trip_s: int = config.SYNTH_MAX_TRIP_S
    base_fuel_eff: Mapping[str, float] = field(default_factory=lambda: {"ICE": 12.0, "HEV": 20.0, "PHEV": 17.0})
    base_batt_eff: Mapping[str, float] = field(default_factory=lambda: {"HEV": 12.0, "PHEV": 7.0, "EV": 6.5})
    temp_coef: float = 0.008        # fractional loss per degC away from ECO_OAT_C
    optimal_speed: float = 60.0     # km/h
    speed_curvature: float = 1e-4   # fractional loss per (km/h)^2 away from optimal_speed
    noise_by_month: Tuple[float, ...] = config.SYNTH_NOISE_BY_MONTH
    noise_scale: float = 1.0
    fuel_rate_frac: float = 1 / 3
    maf_frac: float = 1 / 3
    anchors: int = 6

    def __post_init__(self):
        if self.days < 1 or not self.trips_per_day > 0:
            raise ValidationError(f"days and trips_per_day must be positive, got {self.days}, {self.trips_per_day}")
        if not 0 < self.min_trip_s <= self.max_trip_s:
            raise ValidationError(f"Invalid trip length range [{self.min_trip_s}, {self.max_trip_s}] s")
        if any(n < 0 for n in self.vehicles.values()) or not any(self.vehicles.values()):
            raise ValidationError(f"Vehicle counts must be non-negative with at least one vehicle: {self.vehicles}")
        for name in self.vehicles:
            VehicleType(name)
        if any(not v > 0 for v in list(self.base_fuel_eff.values()) + list(self.base_batt_eff.values())):
            raise ValidationError("Planted base efficiencies must be positive")
        if len(self.noise_by_month) != 12 or any(s < 0 for s in self.noise_by_month) or self.noise_scale < 0:
            raise ValidationError("noise_by_month needs 12 non-negative values and noise_scale >= 0")
        if self.fuel_rate_frac < 0 or self.maf_frac < 0 or self.fuel_rate_frac + self.maf_frac > 1:
            raise ValidationError("fuel_rate_frac and maf_frac must be non-negative and sum to at most 1")
        if self.anchors < 2:
            raise ValidationError(f"At least two OD anchors are needed, got {self.anchors}")

    @classmethod
    def from_run_config(cls, cfg) -> "SynthConfig":
        return cls(days=cfg.synth_days, trips_per_day=cfg.synth_trips_per_day, seed=cfg.seed,
                   epoch_date=cfg.epoch_date, noise_scale=cfg.synth_noise_scale)

    def noise_sd(self, month: int, base: float) -> float:
        """Planted noise std for a month, in the target's units (scaled from the ICE km/L baseline)"""
        reference = self.base_fuel_eff.get("ICE", 12.0)
        return self.noise_by_month[month - 1] * self.noise_scale * base / reference


@dataclass
class SynthResult:
    dynamic_paths: List[str]
    static_path: str
    truth_path: str
    n_trips: int
    n_samples: int


def seasonal_oat(day_of_year: int) -> float:
    """Mean outside air temperature (degC), coldest around 20 January"""
    return 9.0 - 13.0 * math.cos(2 * math.pi * (day_of_year - 20) / 365.25)


def planted_efficiency(base: float, oat_mean: float, speed_mean: float, cfg: SynthConfig) -> float:
    """Noise-free efficiency: peaks at ECO_OAT_C and cfg.optimal_speed"""
    temp_factor = 1 - cfg.temp_coef * abs(oat_mean - ECO_OAT_C)
    speed_factor = 1 - cfg.speed_curvature * (speed_mean - cfg.optimal_speed) ** 2
    return max(base * temp_factor * speed_factor, 0.2 * base)


def speed_profile(rng: np.random.Generator, n: int, cruise: float) -> np.ndarray:
    """Mean-reverting random walk clipped to [0, SPEED_CAP_KMH], one value per second"""
    steps = rng.normal(0.0, 2.0, size=n)
    v = np.empty(n)
    v[0] = rng.uniform(15.0, 30.0)
    for t in range(1, n):
        v[t] = min(max(v[t - 1] + 0.08 * (cruise - v[t - 1]) + steps[t], 0.0), SPEED_CAP_KMH)
    return v


def _texts(values: np.ndarray) -> List[str]:
    return [format_cell(v) for v in np.asarray(values, dtype=float).tolist()]


def _scaled_rate(profile: np.ndarray, hours: np.ndarray, total: float) -> np.ndarray:
    """Scale a positive profile so its trapezoidal integral over `hours` equals total"""
    return profile * (total / float(trapezoid(profile, hours)))


class _TripWriter:
    """Simulates single trips and accumulates their rows per weekly file"""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.epoch = as_epoch(cfg.epoch_date)
        self.anchors = np.column_stack([
            CENTER_LAT + rng.uniform(-ANCHOR_SPREAD_DEG, ANCHOR_SPREAD_DEG, cfg.anchors),
            CENTER_LON + rng.uniform(-ANCHOR_SPREAD_DEG, ANCHOR_SPREAD_DEG, cfg.anchors),
        ])
        self.weeks: Dict[int, List[pd.DataFrame]] = {}
        self.truth: List[List[str]] = []
        self.n_samples = 0

    def _noisy(self, base: float, oat_mean: float, speed_mean: float, month: int) -> float:
        clean = planted_efficiency(base, oat_mean, speed_mean, self.cfg)
        noise = self.rng.normal(0.0, 1.0) * self.cfg.noise_sd(month, base)
        return max(clean + noise, 0.2 * base)

    def add_trip(self, veh_id: str, vehicle_type: VehicleType, trip_id: str, day: int) -> None:
        cfg, rng = self.cfg, self.rng
        duration = int(rng.integers(cfg.min_trip_s, cfg.max_trip_s + 1))
        n = duration + 1
        seconds = np.arange(n, dtype=float)
        start_sod = float(rng.integers(6 * 3600, 22 * 3600))
        day_num = day + (start_sod + seconds) / 86400.0
        start = self.epoch + timedelta(days=float(day_num[0]))

        speed = speed_profile(rng, n, cruise=float(rng.uniform(25.0, 95.0)))
        oat = seasonal_oat(start.timetuple().tm_yday) + rng.normal(0.0, 3.0) + rng.normal(0.0, 0.2, size=n)
        timestamps = (seconds * 1000).astype(np.int64)
        secs = timestamps / 1000.0
        distance_km = float(trapezoid(speed, secs) / 3600.0)
        oat_mean = float(np.mean(oat))
        speed_mean = float(np.mean(speed))

        origin, dest = self.anchors[rng.choice(self.cfg.anchors, size=2, replace=False)]
        origin = origin + rng.normal(0.0, OD_JITTER_DEG, 2)
        dest = dest + rng.normal(0.0, OD_JITTER_DEG, 2)
        frac = seconds / seconds[-1]
        columns: Dict[str, List[str]] = {
            "day_num": _texts(day_num),
            "veh_id": [veh_id] * n,
            "trip_id": [trip_id] * n,
            "timestamp_ms": [str(t) for t in timestamps.tolist()],
            "lat": _texts(origin[0] + (dest[0] - origin[0]) * frac),
            "lon": _texts(origin[1] + (dest[1] - origin[1]) * frac),
            "speed": _texts(speed),
            "oat": _texts(oat),
        }

        true_fuel = true_batt = None
        if vehicle_type.value in cfg.base_fuel_eff:
            true_fuel = self._noisy(cfg.base_fuel_eff[vehicle_type.value], oat_mean, speed_mean, start.month)
            columns.update(self._fuel_channels(vehicle_type, speed, secs, distance_km / true_fuel))
        if vehicle_type.value in cfg.base_batt_eff:
            true_batt = self._noisy(cfg.base_batt_eff[vehicle_type.value], oat_mean, speed_mean, start.month)
            columns.update(self._battery_channels(vehicle_type, speed, secs, distance_km / true_batt))

        frame = pd.DataFrame({header: columns.get(name, [""] * n)
                              for name, header in config.DYNAMIC_COLUMN_MAP.items()}, dtype=str)
        self.weeks.setdefault(day // 7, []).append(frame)
        self.truth.append([veh_id, trip_id, format_cell(true_fuel), format_cell(true_batt)])
        self.n_samples += n

    def _fuel_channels(self, vehicle_type: VehicleType, speed: np.ndarray, secs: np.ndarray,
                       fuel_l: float) -> Dict[str, List[str]]:
        """Channels for one fuel-rate branch, scaled so the estimated rate integrates to fuel_l"""
        rng, n = self.rng, speed.size
        draw = rng.uniform()
        if draw < self.cfg.fuel_rate_frac:
            branch = "fuel_rate"
        elif draw < self.cfg.fuel_rate_frac + self.cfg.maf_frac:
            branch = "maf"
        else:
            branch = "abs_load"
        rpm = 800.0 + 28.0 * speed + rng.normal(0.0, 20.0, n)
        rate_lph = _scaled_rate(0.3 + speed / 50.0, secs / 3600.0, fuel_l)
        channels = {"engine_rpm": _texts(rpm)}
        if branch == "fuel_rate":
            channels["fuel_rate"] = _texts(rate_lph)
            return channels

        stft = np.clip(rng.normal(0.0, 2.0, n), -10.0, 10.0)
        ltft = np.full(n, rng.uniform(-3.0, 3.0))
        correction = (1 + stft / 100 + ltft / 100) / config.AFR
        maf = rate_lph * config.FUEL_DENSITY_G_PER_L / (3600 * correction)
        channels.update(stft_b1=_texts(stft), ltft_b1=_texts(ltft))
        if branch == "maf":
            channels["maf"] = _texts(maf)
        else:
            full_load_gps = config.RHO_AIR_G_PER_L * DISPLACEMENT_L[vehicle_type] * rpm / 120
            channels["abs_load"] = _texts(100 * maf / full_load_gps)
        return channels

    def _battery_channels(self, vehicle_type: VehicleType, speed: np.ndarray, secs: np.ndarray,
                          kwh: float) -> Dict[str, List[str]]:
        n = speed.size
        power_w = _scaled_rate(0.2 + speed / 50.0, secs, kwh * 3.6e6)
        voltage = NOMINAL_VOLTAGE[vehicle_type] + self.rng.normal(0.0, 2.0, n)
        return {"hv_voltage": _texts(voltage), "hv_current": _texts(power_w / voltage)}


def _static_frame(fleet: Sequence[Tuple[str, VehicleType]]) -> pd.DataFrame:
    headers = config.STATIC_COLUMN_MAP
    rows = []
    for veh_id, vehicle_type in fleet:
        displacement = DISPLACEMENT_L.get(vehicle_type)
        rows.append({
            headers["veh_id"]: veh_id,
            headers["vehicle_type"]: vehicle_type.label,
            headers["vehicle_class"]: VEHICLE_CLASS,
            headers["engine_config"]: f"I4 {displacement:.1f}L" if displacement else "NO DATA",
            headers["transmission"]: "CVT" if vehicle_type is not VehicleType.ICE else "5-SPD AT",
            headers["drive_wheels"]: "FWD",
            headers["weight"]: WEIGHT_LB[vehicle_type],
        })
    columns = [h for k, h in headers.items() if k != "displacement"]
    return pd.DataFrame(rows, columns=columns, dtype=str)


def week_file_name(epoch_date: str, week: int) -> str:
    start = as_epoch(epoch_date) + timedelta(days=7 * week)
    return f"VED_{start:%y%m%d}_week.csv"


def generate(cfg: SynthConfig, out_dir: str) -> SynthResult:
    """
    Write weekly dynamic CSVs under raw/, the static table and truth.csv

    Vehicles are numbered from 1 in ICE, HEV, PHEV, EV order; trip ids are
    global and increase in generation order. Single-threaded and fully
    determined by cfg.seed.
    """
    rng = np.random.default_rng(cfg.seed)
    writer = _TripWriter(cfg, rng)

    fleet: List[Tuple[str, VehicleType]] = []
    for vehicle_type in VehicleType:
        for _ in range(cfg.vehicles.get(vehicle_type.value, 0)):
            fleet.append((str(len(fleet) + 1), vehicle_type))

    trip_counter = 0
    for veh_id, vehicle_type in fleet:
        for day in range(cfg.days):
            for _ in range(int(rng.poisson(cfg.trips_per_day))):
                trip_counter += 1
                writer.add_trip(veh_id, vehicle_type, str(trip_counter), day)

    raw_dir = os.path.join(out_dir, config.RAW_DIR)
    os.makedirs(raw_dir, exist_ok=True)
    dynamic_paths = []
    for week in sorted(writer.weeks):
        path = os.path.join(raw_dir, week_file_name(cfg.epoch_date, week))
        pd.concat(writer.weeks[week], ignore_index=True).to_csv(path, index=False, lineterminator="\n")
        dynamic_paths.append(path)

    static_path = os.path.join(out_dir, config.STATIC_FILE)
    _static_frame(fleet).to_csv(static_path, index=False, lineterminator="\n")
    truth_path = os.path.join(out_dir, config.TRUTH_FILE)
    pd.DataFrame(writer.truth, columns=TRUTH_COLUMNS, dtype=str).to_csv(truth_path, index=False,
                                                                       lineterminator="\n")

    logger.info(f"Generated {trip_counter} trips ({writer.n_samples} samples) for {len(fleet)} vehicles "
                f"in {len(dynamic_paths)} weekly files under {raw_dir}")
    return SynthResult(dynamic_paths=dynamic_paths, static_path=static_path, truth_path=truth_path,
                       n_trips=trip_counter, n_samples=writer.n_samples)


def read_truth(path: str) -> Dict[Tuple[str, str], Tuple[Optional[float], Optional[float]]]:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    return {(r["veh_id"], r["trip_id"]): (float(r["true_fuel_eff"]) if r["true_fuel_eff"] else None,
                                          float(r["true_batt_eff"]) if r["true_batt_eff"] else None)
            for r in df.to_dict("records")}


def noisiest_months(cfg: SynthConfig) -> List[int]:
    """Calendar months ordered from highest to lowest planted noise"""
    return sorted(range(1, 13), key=lambda m: (-cfg.noise_by_month[m - 1], m))
