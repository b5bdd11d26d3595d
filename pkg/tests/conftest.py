"""Shared fixtures: hand-built trips, labeled feature rows, small networks and a tiny synthetic fleet"""

import os
import sys
from datetime import datetime, timedelta

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import prob_net  # noqa: E402
from featurize import LabeledTrip, Task  # noqa: E402
from synth import SynthConfig, generate  # noqa: E402
from ved_ingest import SamplePoint, TripSeries, VehicleMeta, VehicleType  # noqa: E402

EPOCH = datetime(2017, 11, 1)


def make_trip(speeds, dt_s=1.0, vehicle_type=VehicleType.ICE, displacement_l=2.0, day_num=0.0,
              veh_id="1", trip_id="1", lat=42.28, lon=-83.74, **channels):
    """TripSeries with one sample per speed value; channels are scalars or per-sample sequences"""
    n = len(speeds)

    def at(value, i):
        if value is None or np.isscalar(value):
            return value
        return value[i]

    samples = []
    for i in range(n):
        extra = {name: (None if at(v, i) is None else float(at(v, i))) for name, v in channels.items()}
        samples.append(SamplePoint(
            day_num=day_num + i * dt_s / 86400.0,
            timestamp_ms=int(round(i * dt_s * 1000)),
            lat=float(at(lat, i)), lon=float(at(lon, i)),
            speed=None if at(speeds, i) is None else float(at(speeds, i)),
            **extra,
        ))
    meta = VehicleMeta(veh_id=veh_id, vehicle_type=vehicle_type, displacement_l=displacement_l)
    return TripSeries(veh_id=veh_id, trip_id=trip_id, meta=meta, samples=tuple(samples),
                      start_datetime=EPOCH + timedelta(days=day_num))


def planted_target(X):
    return 2.0 * X[:, 0] - X[:, 1] + 0.5 * X[:, 2] ** 2


def make_rows(n, seed=0, noise=0.1, vehicle_type=VehicleType.ICE, task=Task.FUEL,
              names=("x0", "x1", "x2"), target_fn=planted_target):
    """LabeledTrip rows spread over a year with a smooth planted target"""
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 1.0, size=(n, len(names)))
    y = target_fn(X) + rng.normal(0.0, noise, size=n)
    rows = []
    for i in range(n):
        start = EPOCH + timedelta(days=365.0 * i / n, hours=float(rng.integers(6, 22)))
        rows.append(LabeledTrip(veh_id=str(1 + i % 4), trip_id=str(i + 1), vehicle_type=vehicle_type,
                                task=task, month=start.month, start_datetime=start, target=float(y[i]),
                                features=tuple(float(v) for v in X[i]), feature_names=tuple(names)))
    return rows


@pytest.fixture
def trip_factory():
    return make_trip


@pytest.fixture(scope="session")
def rows_factory():
    return make_rows


@pytest.fixture
def small_params():
    return prob_net.init(3, seed=7, widths=(5, 4))


@pytest.fixture(scope="session")
def tiny_fleet(tmp_path_factory):
    """Two months of telemetry for one vehicle of each type, generated without noise"""
    out = tmp_path_factory.mktemp("tiny_fleet")
    cfg = SynthConfig(vehicles={"ICE": 1, "HEV": 1, "PHEV": 1, "EV": 1}, days=60, trips_per_day=0.5,
                      seed=11, noise_scale=0.0)
    return cfg, generate(cfg, str(out))
