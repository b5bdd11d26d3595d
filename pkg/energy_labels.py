"""
Energy Labeling Module
Per-trip distance, fuel consumption (air-flow based FCR estimation), battery energy
and the two efficiency targets km/L and km/kWh
"""

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

import config
from logger_config import get_logger
from validation import ValidationError
from ved_ingest import SamplePoint, TripSeries, VehicleMeta, VehicleType, format_cell, id_sort_key

logger = get_logger("Labels")

FUEL_TYPES = (VehicleType.ICE, VehicleType.HEV, VehicleType.PHEV)
BATTERY_TYPES = (VehicleType.HEV, VehicleType.PHEV, VehicleType.EV)

KM_PER_L_TO_MPG = 2.352145833

LABELED_COLUMNS = ["veh_id", "trip_id", "vehicle_type", "start_iso", "month", "distance_km",
                   "duration_s", "fuel_l", "battery_kwh", "fuel_eff", "batt_eff", "reject_reason"]


@dataclass(frozen=True)
class FcrConstants:
    afr: float = config.AFR
    rho_air: float = config.RHO_AIR_G_PER_L
    fuel_density: float = config.FUEL_DENSITY_G_PER_L

    def __post_init__(self):
        for name in ("afr", "rho_air", "fuel_density"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"FCR constant {name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class LabelFilters:
    min_duration_s: float = config.MIN_DURATION_S
    min_distance_km: float = config.MIN_DISTANCE_KM
    max_fuel_eff: float = config.MAX_FUEL_EFF
    max_batt_eff: float = config.MAX_BATT_EFF
    fcr_min_coverage: float = config.FCR_MIN_COVERAGE
    battery_sign: float = config.BATTERY_SIGN


@dataclass(frozen=True)
class TripEnergy:
    """Energy accounting for one trip; reject_reason is set when no label survives"""
    veh_id: str
    trip_id: str
    vehicle_type: VehicleType
    start_datetime: datetime
    distance_km: Optional[float]
    duration_s: float
    fuel_l: Optional[float] = None
    battery_kwh: Optional[float] = None
    fuel_eff_km_per_l: Optional[float] = None
    batt_eff_km_per_kwh: Optional[float] = None
    reject_reason: Optional[str] = None

    @property
    def month(self) -> int:
        return self.start_datetime.month

    @property
    def rejected(self) -> bool:
        return self.reject_reason is not None


@dataclass
class LabelingReport:
    labeled: int = 0
    rejected: Counter = field(default_factory=Counter)
    dropped_efficiencies: Counter = field(default_factory=Counter)
    clamped_glitches: int = 0

    def to_dict(self) -> Dict:
        return {
            "labeled": self.labeled,
            "rejected": dict(sorted(self.rejected.items())),
            "dropped_efficiencies": dict(sorted(self.dropped_efficiencies.items())),
            "clamped_glitches": self.clamped_glitches,
        }


def estimate_maf(abs_load: float, engine_rpm: float, displacement_l: float, rho_air: float) -> float:
    """Mass air flow (g/s) from absolute load, engine speed and displacement (4-stroke)"""
    return abs_load / 100 * rho_air * displacement_l * engine_rpm / 120


def fcr_at_sample(sample: SamplePoint, meta: VehicleMeta, k: FcrConstants,
                  glitches: Optional[Counter] = None) -> Optional[float]:
    """
    Fuel consumption rate in L/h for one sample, or None

    Priority: measured fuel rate, then MAF, then MAF reconstructed from
    absolute load, RPM and displacement. Bank-1 trims correct the air-fuel
    ratio; absent trims count as 0.
    """
    stft = sample.stft_b1 if sample.stft_b1 is not None else 0.0
    ltft = sample.ltft_b1 if sample.ltft_b1 is not None else 0.0
    correction = (1 + stft / 100 + ltft / 100) / k.afr

    if sample.fuel_rate is not None:
        rate = sample.fuel_rate
    elif sample.maf is not None:
        rate = sample.maf * correction * 3600 / k.fuel_density
    elif (sample.abs_load is not None and sample.engine_rpm is not None
          and meta.displacement_l is not None):
        maf = estimate_maf(sample.abs_load, sample.engine_rpm, meta.displacement_l, k.rho_air)
        rate = maf * correction * 3600 / k.fuel_density
    else:
        return None

    if rate < 0:
        if glitches is not None:
            glitches["negative_fcr"] += 1
        rate = 0.0
    return rate


def _seconds(samples: Sequence[SamplePoint]) -> np.ndarray:
    return np.array([s.timestamp_ms for s in samples], dtype=float) / 1000.0


def trip_distance(trip: TripSeries) -> Optional[float]:
    """Trapezoidal integral of speed over time, in km (None with fewer than 2 speed samples)"""
    with_speed = [s for s in trip.samples if s.speed is not None]
    if len(with_speed) < 2:
        return None
    speed = np.array([s.speed for s in with_speed], dtype=float)
    return float(trapezoid(speed, _seconds(with_speed)) / 3600.0)


def trip_fuel(trip: TripSeries, meta: VehicleMeta, k: FcrConstants,
              min_coverage: float = config.FCR_MIN_COVERAGE,
              glitches: Optional[Counter] = None) -> Optional[float]:
    """Liters of fuel over the trip, None when too few samples yield a fuel rate"""
    rates, times = [], []
    for sample in trip.samples:
        rate = fcr_at_sample(sample, meta, k, glitches)
        if rate is not None:
            rates.append(rate)
            times.append(sample.timestamp_ms / 3.6e6)
    coverage = len(rates) / len(trip.samples) if trip.samples else 0.0
    if coverage < min_coverage or len(rates) < 2:
        return None
    return float(trapezoid(np.array(rates), np.array(times)))


def trip_battery(trip: TripSeries, battery_sign: float = config.BATTERY_SIGN) -> Optional[float]:
    """
    Net battery discharge in kWh (positive = discharge)

    Returns None without at least two voltage/current samples or when
    regeneration outweighs discharge.
    """
    usable = [s for s in trip.samples if s.hv_current is not None and s.hv_voltage is not None]
    if len(usable) < 2:
        return None
    power_w = np.array([s.hv_voltage * s.hv_current for s in usable], dtype=float) * battery_sign
    kwh = float(trapezoid(power_w, _seconds(usable)) / 3.6e6)
    if kwh < 0:
        return None
    return kwh


def label_trip(trip: TripSeries, meta: VehicleMeta, k: FcrConstants,
               filters: LabelFilters = LabelFilters(),
               glitches: Optional[Counter] = None) -> TripEnergy:
    """
    Compute the efficiency labels of one trip

    ICE trips get a fuel label, EV trips a battery label, HEV/PHEV either or both.
    A trip with no surviving label carries a reject_reason.
    """
    duration = trip.duration_s
    distance = trip_distance(trip)
    base = dict(veh_id=trip.veh_id, trip_id=trip.trip_id, vehicle_type=meta.vehicle_type,
                start_datetime=trip.start_datetime, distance_km=distance, duration_s=duration)

    if duration < filters.min_duration_s or duration <= 0:
        return TripEnergy(**base, reject_reason="min_duration")
    if distance is None:
        return TripEnergy(**base, reject_reason="no_speed")
    if distance < filters.min_distance_km:
        return TripEnergy(**base, reject_reason="min_distance")

    fuel = kwh = fuel_eff = batt_eff = None
    reasons = []
    if meta.vehicle_type in FUEL_TYPES:
        fuel = trip_fuel(trip, meta, k, filters.fcr_min_coverage, glitches)
        if fuel is not None and fuel > 0:
            fuel_eff = distance / fuel
            if fuel_eff > filters.max_fuel_eff:
                reasons.append("max_fuel_eff")
                fuel_eff = None
        else:
            reasons.append("no_fuel")
    if meta.vehicle_type in BATTERY_TYPES:
        kwh = trip_battery(trip, filters.battery_sign)
        if kwh is not None and kwh > 0:
            batt_eff = distance / kwh
            if batt_eff > filters.max_batt_eff:
                reasons.append("max_batt_eff")
                batt_eff = None
        else:
            reasons.append("no_battery")

    reject = None if (fuel_eff is not None or batt_eff is not None) else ";".join(reasons)
    if reject is None and reasons and glitches is not None:
        for reason in reasons:
            glitches[f"partial:{reason}"] += 1
    return TripEnergy(**base, fuel_l=fuel, battery_kwh=kwh, fuel_eff_km_per_l=fuel_eff,
                      batt_eff_km_per_kwh=batt_eff, reject_reason=reject)


def label_trips(trips: Sequence[TripSeries], k: FcrConstants = FcrConstants(),
                filters: LabelFilters = LabelFilters(), threads: int = 1):
    """
    Label a whole dataset

    Returns:
        (list of TripEnergy in input order, LabelingReport)
    """
    def work(trip: TripSeries):
        counts = Counter()
        return label_trip(trip, trip.meta, k, filters, counts), counts

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(work, trips))

    report = LabelingReport()
    energies = []
    for energy, counts in results:
        energies.append(energy)
        report.clamped_glitches += counts.pop("negative_fcr", 0)
        for key, n in counts.items():
            report.dropped_efficiencies[key.split(":", 1)[1]] += n
        if energy.rejected:
            report.rejected[energy.reject_reason] += 1
        else:
            report.labeled += 1

    if report.clamped_glitches:
        logger.warning(f"Clamped {report.clamped_glitches} negative fuel-rate samples to 0")
    logger.info(f"Labeled {report.labeled} trips, rejected {sum(report.rejected.values())} "
                f"{dict(report.rejected)}")
    return energies, report


def fuel_efficiency_units(km_per_l: float) -> Dict[str, float]:
    """Express a km/L efficiency as L/100 km and US miles per gallon"""
    return {
        "km_per_l": km_per_l,
        "l_per_100km": 100.0 / km_per_l if km_per_l > 0 else float("inf"),
        "mpg": km_per_l * KM_PER_L_TO_MPG,
    }


def write_labeled(energies: Sequence[TripEnergy], path: str) -> None:
    rows = []
    for e in energies:
        rows.append([e.veh_id, e.trip_id, e.vehicle_type.value, e.start_datetime.isoformat(),
                     str(e.month), format_cell(e.distance_km), format_cell(e.duration_s),
                     format_cell(e.fuel_l), format_cell(e.battery_kwh),
                     format_cell(e.fuel_eff_km_per_l), format_cell(e.batt_eff_km_per_kwh),
                     e.reject_reason or ""])
    pd.DataFrame(rows, columns=LABELED_COLUMNS, dtype=str).to_csv(path, index=False)
    logger.info(f"Wrote {len(rows)} labeled trips to {path}")


def read_labeled(path: str) -> List[TripEnergy]:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)

    def num(value: str) -> Optional[float]:
        return float(value) if value != "" else None

    energies = []
    for row in df.itertuples(index=False):
        energies.append(TripEnergy(
            veh_id=row.veh_id,
            trip_id=row.trip_id,
            vehicle_type=VehicleType(row.vehicle_type),
            start_datetime=datetime.fromisoformat(row.start_iso),
            distance_km=num(row.distance_km),
            duration_s=float(row.duration_s),
            fuel_l=num(row.fuel_l),
            battery_kwh=num(row.battery_kwh),
            fuel_eff_km_per_l=num(row.fuel_eff),
            batt_eff_km_per_kwh=num(row.batt_eff),
            reject_reason=row.reject_reason or None,
        ))
    return energies


def energies_by_key(energies: Sequence[TripEnergy]) -> Mapping:
    return {(e.veh_id, e.trip_id): e for e in sorted(energies, key=lambda e: (id_sort_key(e.veh_id),
                                                                          id_sort_key(e.trip_id)))}
