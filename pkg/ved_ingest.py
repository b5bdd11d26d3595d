"""
VED Ingestion Module
Parses Vehicle Energy Dataset dynamic/static CSVs, assembles per-trip time series
and computes dataset summary statistics
"""

import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import config
from logger_config import get_logger
from validation import DuplicateVehicleError, SampleValidator, require_columns

logger = get_logger("Ingest")

TripKey = Tuple[str, str]


class VehicleType(str, Enum):
    ICE = "ICE"
    HEV = "HEV"
    PHEV = "PHEV"
    EV = "EV"

    @property
    def label(self) -> str:
        """Spelling used by the published static table"""
        return "ICE Vehicle" if self is VehicleType.ICE else self.value


VEHICLE_TYPE_LABELS = {
    "ICE VEHICLE": VehicleType.ICE,
    "HEV": VehicleType.HEV,
    "PHEV": VehicleType.PHEV,
    "EV": VehicleType.EV,
}

OPTIONAL_CHANNELS = (
    "speed", "engine_rpm", "maf", "fuel_rate", "abs_load",
    "stft_b1", "stft_b2", "ltft_b1", "ltft_b2", "oat", "hv_current", "hv_voltage",
)

# Canonical trips.csv header, keyed by SamplePoint field
CANONICAL_COLUMN_MAP = {
    "veh_id": "veh_id",
    "trip_id": "trip_id",
    "timestamp_ms": "timestamp_ms",
    "day_num": "day_num",
    "lat": "lat",
    "lon": "lon",
    "speed": "speed_kmh",
    "engine_rpm": "engine_rpm",
    "maf": "maf_gps",
    "fuel_rate": "fuel_rate_lph",
    "abs_load": "abs_load_pct",
    "stft_b1": "stft_b1",
    "stft_b2": "stft_b2",
    "ltft_b1": "ltft_b1",
    "ltft_b2": "ltft_b2",
    "oat": "oat_c",
    "hv_current": "hv_current_a",
    "hv_voltage": "hv_voltage_v",
}

# Normalized vehicles.csv written by the ingest stage
VEHICLES_COLUMN_MAP = {
    "veh_id": "veh_id",
    "vehicle_type": "vehicle_type",
    "vehicle_class": "vehicle_class",
    "engine_config": "engine_config",
    "displacement": "displacement_l",
    "transmission": "transmission",
    "drive_wheels": "drive_wheels",
    "weight": "weight_lb",
}

REQUIRED_DYNAMIC = ("veh_id", "trip_id", "timestamp_ms", "speed")

_DISPLACEMENT_IN_TEXT = re.compile(r"(\d+(?:\.\d+)?)\s*L\b", re.IGNORECASE)
_NUMBER = re.compile(r"\d+(?:\.\d+)?")


@dataclass(frozen=True)
class SamplePoint:
    """One timestamped telemetry record"""
    day_num: float
    timestamp_ms: int
    lat: Optional[float] = None
    lon: Optional[float] = None
    speed: Optional[float] = None
    engine_rpm: Optional[float] = None
    maf: Optional[float] = None
    fuel_rate: Optional[float] = None
    abs_load: Optional[float] = None
    stft_b1: Optional[float] = None
    stft_b2: Optional[float] = None
    ltft_b1: Optional[float] = None
    ltft_b2: Optional[float] = None
    oat: Optional[float] = None
    hv_current: Optional[float] = None
    hv_voltage: Optional[float] = None


@dataclass(frozen=True)
class VehicleMeta:
    veh_id: str
    vehicle_type: VehicleType
    vehicle_class: Optional[str] = None
    engine_config: Optional[str] = None
    displacement_l: Optional[float] = None
    transmission: Optional[str] = None
    drive_wheels: Optional[str] = None
    weight_lb: Optional[float] = None


@dataclass(frozen=True)
class TripSeries:
    veh_id: str
    trip_id: str
    meta: VehicleMeta
    samples: Tuple[SamplePoint, ...]
    start_datetime: datetime

    @property
    def key(self) -> TripKey:
        return (self.veh_id, self.trip_id)

    @property
    def duration_s(self) -> float:
        return (self.samples[-1].timestamp_ms - self.samples[0].timestamp_ms) / 1000.0


@dataclass
class SkipReport:
    """Rows that could not be turned into SamplePoints"""
    count: int = 0
    reasons: Counter = field(default_factory=Counter)
    examples: List[Tuple[str, int, str]] = field(default_factory=list)

    MAX_EXAMPLES = 20

    def add(self, source: str, line: int, reason: str) -> None:
        self.count += 1
        self.reasons[reason] += 1
        if len(self.examples) < self.MAX_EXAMPLES:
            self.examples.append((source, line, reason))

    def merge(self, other: "SkipReport") -> None:
        self.count += other.count
        self.reasons.update(other.reasons)
        room = self.MAX_EXAMPLES - len(self.examples)
        self.examples.extend(other.examples[:max(room, 0)])

    def to_dict(self) -> Dict:
        return {
            "count": self.count,
            "reasons": dict(sorted(self.reasons.items())),
            "examples": [{"source": s, "line": n, "reason": r} for s, n, r in self.examples],
        }


@dataclass
class DynamicParseResult:
    groups: Dict[TripKey, List[SamplePoint]]
    skipped: SkipReport


@dataclass
class StaticParseResult:
    vehicles: Dict[str, VehicleMeta]
    rejected: List[str]


@dataclass
class AssemblyResult:
    trips: List[TripSeries]
    dropped_trips: int = 0
    missing_vehicles: List[str] = field(default_factory=list)
    duplicate_samples: int = 0


@dataclass(frozen=True)
class DatasetSummary:
    n_vehicles: int = 0
    n_trips: int = 0
    total_distance_km: float = 0.0
    avg_trips_per_day: float = 0.0
    avg_trip_duration_min: float = 0.0
    trips_per_type: Dict[str, int] = field(default_factory=dict)
    vehicles_per_type: Dict[str, int] = field(default_factory=dict)
    n_fleet_vehicles: int = 0

    def to_dict(self) -> Dict:
        return {
            "n_vehicles": self.n_vehicles,
            "n_fleet_vehicles": self.n_fleet_vehicles,
            "n_trips": self.n_trips,
            "total_distance_km": self.total_distance_km,
            "avg_trips_per_day": self.avg_trips_per_day,
            "avg_trip_duration_min": self.avg_trip_duration_min,
            "trips_per_type": dict(self.trips_per_type),
            "vehicles_per_type": dict(self.vehicles_per_type),
        }


def id_sort_key(value: str):
    """Numeric ids sort numerically, anything else lexically after them"""
    try:
        return (0, float(value), value)
    except ValueError:
        return (1, 0.0, value)


def _to_float(cell: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        return np.nan
    return value if math.isfinite(value) else np.nan


def _parse_numeric(raw: pd.Series) -> Tuple[pd.Series, pd.Series, pd.Series]:
    """
    Parse one text column

    Returns:
        (values with NaN for absent, missing mask, unparseable mask)
    """
    text = raw.str.strip()
    missing = text.str.upper().isin(config.MISSING_TOKENS)
    values = text.where(~missing).map(_to_float, na_action="ignore").astype(float)
    bad = ~missing & values.isna()
    return values, missing, bad


def _read_text_table(csv_stream) -> pd.DataFrame:
    df = pd.read_csv(csv_stream, dtype=str, keep_default_na=False, skipinitialspace=True)
    df.columns = [str(c).strip() for c in df.columns]
    return df


def parse_dynamic(csv_stream, column_map: Optional[Mapping[str, str]] = None,
                  source: str = "dynamic") -> DynamicParseResult:
    """
    Parse one VED-format dynamic CSV into SamplePoints grouped by (veh_id, trip_id)

    Unknown columns are ignored and empty cells map to absent optionals.
    Rows with an unparseable numeric cell are skipped and counted.

    Args:
        csv_stream: path or file-like object with a header row
        column_map: SamplePoint field -> header name (defaults to published VED names)
        source: label used in the skip report

    Returns:
        DynamicParseResult with groups in first-seen order and the skip report
    """
    column_map = dict(config.DYNAMIC_COLUMN_MAP if column_map is None else column_map)
    df = _read_text_table(csv_stream)
    require_columns(df.columns, [column_map[f] for f in REQUIRED_DYNAMIC], source)

    n_rows = len(df)
    skipped = SkipReport()
    reject = pd.Series([""] * n_rows, index=df.index, dtype=object)

    def mark(mask: pd.Series, reason: str) -> None:
        fresh = mask & reject.eq("")
        reject[fresh] = reason

    ids = {}
    for name in ("veh_id", "trip_id"):
        text = df[column_map[name]].str.strip()
        mark(text.eq(""), f"missing:{name}")
        ids[name] = text

    numeric: Dict[str, pd.Series] = {}
    for name in ("timestamp_ms", "day_num", "lat", "lon") + OPTIONAL_CHANNELS:
        header = column_map.get(name)
        if header is None or header not in df.columns:
            numeric[name] = pd.Series(np.nan, index=df.index)
            continue
        values, missing, bad = _parse_numeric(df[header])
        mark(bad, f"unparseable:{name}")
        if name in ("timestamp_ms", "day_num"):
            mark(missing, f"missing:{name}")
        numeric[name] = values
    if column_map.get("day_num") not in df.columns:
        numeric["day_num"] = pd.Series(0.0, index=df.index)

    groups: Dict[TripKey, List[SamplePoint]] = {}
    columns = {name: series.astype(object).where(series.notna(), None).to_numpy()
               for name, series in numeric.items()}
    veh_ids = ids["veh_id"].to_numpy()
    trip_ids = ids["trip_id"].to_numpy()
    reasons = reject.to_numpy()

    for i in range(n_rows):
        if reasons[i]:
            skipped.add(source, i + 2, reasons[i])
            continue
        sample = SamplePoint(
            day_num=float(columns["day_num"][i]),
            timestamp_ms=int(round(columns["timestamp_ms"][i])),
            lat=columns["lat"][i],
            lon=columns["lon"][i],
            **{name: columns[name][i] for name in OPTIONAL_CHANNELS},
        )
        if sample.lat is not None and sample.lon is not None:
            ok, msg = SampleValidator.validate_sample(sample)
        else:
            ok, msg = sample.timestamp_ms >= 0 and (sample.speed is None or sample.speed >= 0), "out of range"
        if not ok:
            skipped.add(source, i + 2, "range")
            logger.debug(f"{source}:{i + 2} out of range: {msg}")
            continue
        groups.setdefault((veh_ids[i], trip_ids[i]), []).append(sample)

    if skipped.count:
        logger.warning(f"{source}: skipped {skipped.count} of {n_rows} rows {dict(skipped.reasons)}")
    logger.info(f"{source}: parsed {n_rows - skipped.count} samples in {len(groups)} trip groups")
    return DynamicParseResult(groups=groups, skipped=skipped)


def parse_dynamic_files(paths: Sequence[str], column_map: Optional[Mapping[str, str]] = None,
                        threads: int = 1) -> DynamicParseResult:
    """Parse several dynamic files (optionally concurrently) and merge in input order"""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda p: parse_dynamic(p, column_map, source=str(p)), paths))
    merged: Dict[TripKey, List[SamplePoint]] = {}
    skipped = SkipReport()
    for result in results:
        skipped.merge(result.skipped)
        for key, samples in result.groups.items():
            merged.setdefault(key, []).extend(samples)
    return DynamicParseResult(groups=merged, skipped=skipped)


def _clean_text(value: str) -> Optional[str]:
    text = value.strip() if isinstance(value, str) else ""
    return None if text.upper() in config.MISSING_TOKENS else text


def _parse_displacement(engine_text: Optional[str], displacement_text: Optional[str]) -> Optional[float]:
    litres = None
    if displacement_text:
        match = _NUMBER.search(displacement_text)
        litres = float(match.group(0)) if match else None
    elif engine_text:
        match = _DISPLACEMENT_IN_TEXT.search(engine_text)
        litres = float(match.group(1)) if match else None
    return litres if litres is not None and litres > 0 else None


def _parse_weight(text: Optional[str]) -> Optional[float]:
    if not text:
        return None
    match = _NUMBER.search(text.replace(",", ""))
    return float(match.group(0)) if match else None


def parse_static(csv_stream, column_map: Optional[Mapping[str, str]] = None,
                 source: str = "static") -> StaticParseResult:
    """
    Parse the static vehicle table into VehicleMeta records

    Returns:
        StaticParseResult(vehicles keyed by veh_id, rejected row descriptions)

    Raises:
        DuplicateVehicleError: the same veh_id appears twice
    """
    column_map = dict(config.STATIC_COLUMN_MAP if column_map is None else column_map)
    df = _read_text_table(csv_stream)
    require_columns(df.columns, [column_map["veh_id"], column_map["vehicle_type"]], source)

    def cell(row, name: str) -> Optional[str]:
        header = column_map.get(name)
        if header is None or header not in df.columns:
            return None
        return _clean_text(row[header])

    vehicles: Dict[str, VehicleMeta] = {}
    rejected: List[str] = []
    for idx, row in df.iterrows():
        veh_id = (row[column_map["veh_id"]] or "").strip()
        type_text = (row[column_map["vehicle_type"]] or "").strip()
        vehicle_type = VEHICLE_TYPE_LABELS.get(type_text.upper())
        if not veh_id or vehicle_type is None:
            message = f"{source}:{idx + 2} veh_id='{veh_id}' unknown vehicle type '{type_text}'"
            logger.warning(f"Rejected static row {message}")
            rejected.append(message)
            continue
        if veh_id in vehicles:
            logger.error(f"Duplicate vehicle id {veh_id} in {source}")
            raise DuplicateVehicleError(f"Duplicate veh_id '{veh_id}' in {source}")

        engine_text = cell(row, "engine_config")
        displacement = _parse_displacement(engine_text, cell(row, "displacement"))
        engine_config = engine_text
        if engine_text and cell(row, "displacement") is None:
            engine_config = _DISPLACEMENT_IN_TEXT.sub("", engine_text).strip() or None

        vehicles[veh_id] = VehicleMeta(
            veh_id=veh_id,
            vehicle_type=vehicle_type,
            vehicle_class=cell(row, "vehicle_class"),
            engine_config=engine_config,
            displacement_l=displacement,
            transmission=cell(row, "transmission"),
            drive_wheels=cell(row, "drive_wheels"),
            weight_lb=_parse_weight(cell(row, "weight")),
        )
    logger.info(f"{source}: {len(vehicles)} vehicles, {len(rejected)} rejected rows")
    return StaticParseResult(vehicles=vehicles, rejected=rejected)


def parse_static_files(paths: Sequence[str], column_map: Optional[Mapping[str, str]] = None) -> StaticParseResult:
    """Merge several static tables; a veh_id repeated across files is a duplicate too"""
    vehicles: Dict[str, VehicleMeta] = {}
    rejected: List[str] = []
    for path in paths:
        result = parse_static(path, column_map, source=str(path))
        clash = sorted(set(vehicles) & set(result.vehicles), key=id_sort_key)
        if clash:
            raise DuplicateVehicleError(f"Duplicate veh_id {clash[0]} across static files ({path})")
        vehicles.update(result.vehicles)
        rejected.extend(result.rejected)
    return StaticParseResult(vehicles=vehicles, rejected=rejected)


def as_epoch(epoch_date: Union[str, date, datetime]) -> datetime:
    if isinstance(epoch_date, datetime):
        return epoch_date
    if isinstance(epoch_date, date):
        return datetime(epoch_date.year, epoch_date.month, epoch_date.day)
    return datetime.strptime(str(epoch_date).strip(), "%Y-%m-%d")


def assemble_trips(groups: Mapping[TripKey, Sequence[SamplePoint]],
                   static_map: Mapping[str, VehicleMeta],
                   epoch_date: Union[str, date, datetime] = config.VED_EPOCH_DATE) -> AssemblyResult:
    """
    Combine dynamic samples with static metadata into TripSeries

    Samples are sorted by timestamp; a repeated timestamp keeps its first sample.
    Trips whose vehicle has no static record are dropped and counted.
    """
    epoch = as_epoch(epoch_date)
    trips: List[TripSeries] = []
    dropped = 0
    missing = set()
    duplicates = 0

    for key in sorted(groups, key=lambda k: (id_sort_key(k[0]), id_sort_key(k[1]))):
        veh_id, trip_id = key
        samples = groups[key]
        meta = static_map.get(veh_id)
        if meta is None:
            dropped += 1
            missing.add(veh_id)
            continue
        if not samples:
            continue
        ordered = []
        for sample in sorted(samples, key=lambda s: s.timestamp_ms):
            if ordered and sample.timestamp_ms == ordered[-1].timestamp_ms:
                duplicates += 1
                continue
            ordered.append(sample)
        trips.append(TripSeries(
            veh_id=veh_id,
            trip_id=trip_id,
            meta=meta,
            samples=tuple(ordered),
            start_datetime=epoch + timedelta(days=ordered[0].day_num),
        ))

    if dropped:
        logger.warning(f"Dropped {dropped} trips from {len(missing)} vehicles without static metadata")
    if duplicates:
        logger.info(f"Removed {duplicates} samples with repeated timestamps")
    logger.info(f"Assembled {len(trips)} trips")
    return AssemblyResult(trips=trips, dropped_trips=dropped,
                          missing_vehicles=sorted(missing, key=id_sort_key),
                          duplicate_samples=duplicates)


def summarize(trips: Sequence[TripSeries],
              static_map: Optional[Mapping[str, VehicleMeta]] = None,
              distances: Optional[Mapping[TripKey, float]] = None) -> DatasetSummary:
    """
    Dataset summary in the layout of the published dataset table

    Distances come from `distances` when given (labeled trips), otherwise from
    integrating each trip's speed channel.
    """
    n_fleet = len(static_map) if static_map else 0
    fleet_types = Counter(m.vehicle_type.value for m in static_map.values()) if static_map else Counter()
    if not trips:
        return DatasetSummary(n_fleet_vehicles=n_fleet, vehicles_per_type=dict(sorted(fleet_types.items())))

    from energy_labels import trip_distance

    total_km = 0.0
    for trip in trips:
        km = distances.get(trip.key) if distances is not None else trip_distance(trip)
        total_km += km or 0.0

    vehicles = {t.veh_id: t.meta.vehicle_type.value for t in trips}
    trips_per_type = Counter(t.meta.vehicle_type.value for t in trips)
    days = {t.start_datetime.date() for t in trips}
    durations = [t.duration_s / 60.0 for t in trips]

    return DatasetSummary(
        n_vehicles=len(vehicles),
        n_trips=len(trips),
        total_distance_km=total_km,
        avg_trips_per_day=len(trips) / len(days),
        avg_trip_duration_min=float(np.mean(durations)),
        trips_per_type=dict(sorted(trips_per_type.items())),
        vehicles_per_type=dict(sorted((fleet_types or Counter(vehicles.values())).items())),
        n_fleet_vehicles=n_fleet or len(vehicles),
    )


def format_cell(value) -> str:
    """Lossless CSV cell: repr for floats, empty for absent values"""
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_trips(trips: Iterable[TripSeries], path: str) -> int:
    """Write the canonical trips.csv; returns the number of sample rows"""
    headers = list(CANONICAL_COLUMN_MAP.values())
    fields = list(CANONICAL_COLUMN_MAP.keys())
    rows = []
    for trip in trips:
        for sample in trip.samples:
            values = {"veh_id": trip.veh_id, "trip_id": trip.trip_id}
            rows.append([format_cell(values[f]) if f in values else format_cell(getattr(sample, f))
                         for f in fields])
    pd.DataFrame(rows, columns=headers, dtype=str).to_csv(path, index=False)
    logger.info(f"Wrote {len(rows)} samples to {path}")
    return len(rows)


def read_trips(path: str, static_map: Mapping[str, VehicleMeta],
               epoch_date: Union[str, date, datetime] = config.VED_EPOCH_DATE) -> List[TripSeries]:
    parsed = parse_dynamic(path, CANONICAL_COLUMN_MAP, source=str(path))
    return assemble_trips(parsed.groups, static_map, epoch_date).trips


def write_vehicles(static_map: Mapping[str, VehicleMeta], path: str) -> None:
    rows = []
    for veh_id in sorted(static_map, key=id_sort_key):
        m = static_map[veh_id]
        rows.append([m.veh_id, m.vehicle_type.label, format_cell(m.vehicle_class),
                     format_cell(m.engine_config), format_cell(m.displacement_l),
                     format_cell(m.transmission), format_cell(m.drive_wheels),
                     format_cell(m.weight_lb)])
    pd.DataFrame(rows, columns=list(VEHICLES_COLUMN_MAP.values()), dtype=str).to_csv(path, index=False)


def read_vehicles(path: str) -> Dict[str, VehicleMeta]:
    return parse_static(path, VEHICLES_COLUMN_MAP, source=str(path)).vehicles
