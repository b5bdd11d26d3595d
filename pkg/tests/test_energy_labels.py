from collections import Counter

import numpy as np
import pytest

from energy_labels import (FcrConstants, LabelFilters, estimate_maf, fcr_at_sample, fuel_efficiency_units,
                           label_trip, label_trips, read_labeled, trip_battery, trip_distance, trip_fuel,
                           write_labeled)
from validation import ValidationError
from ved_ingest import SamplePoint, VehicleMeta, VehicleType

K = FcrConstants()
ICE = VehicleMeta(veh_id="1", vehicle_type=VehicleType.ICE, displacement_l=2.0)


def sample(**channels):
    return SamplePoint(day_num=0.0, timestamp_ms=0, **channels)


def test_fuel_rate_passes_through():
    assert fcr_at_sample(sample(fuel_rate=2.0), ICE, K) == 2.0


def test_maf_branch():
    assert fcr_at_sample(sample(maf=14.7), ICE, K) == pytest.approx(3600 / 745)
    assert fcr_at_sample(sample(maf=14.7), ICE, K) == pytest.approx(4.832, abs=5e-4)


def test_trims_scale_the_maf_branch():
    plain = fcr_at_sample(sample(maf=14.7), ICE, K)
    trimmed = fcr_at_sample(sample(maf=14.7, stft_b1=5.0, ltft_b1=-2.0, stft_b2=50.0), ICE, K)
    assert trimmed == pytest.approx(plain * 1.03)


def test_absolute_load_branch():
    assert estimate_maf(100.0, 2400.0, 2.0, 1.225) == pytest.approx(49.0)
    rate = fcr_at_sample(sample(abs_load=100.0, engine_rpm=2400.0), ICE, K)
    assert rate == pytest.approx(49.0 / 14.7 * 3600 / 745)


def test_no_fuel_channel():
    assert fcr_at_sample(sample(speed=40.0), ICE, K) is None
    no_displacement = VehicleMeta(veh_id="2", vehicle_type=VehicleType.ICE)
    assert fcr_at_sample(sample(abs_load=50.0, engine_rpm=2000.0), no_displacement, K) is None


def test_branch_priority():
    everything = sample(fuel_rate=1.25, maf=30.0, abs_load=80.0, engine_rpm=3000.0)
    assert fcr_at_sample(everything, ICE, K) == 1.25


def test_negative_rate_is_clamped_and_counted():
    glitches = Counter()
    assert fcr_at_sample(sample(maf=10.0, stft_b1=-150.0), ICE, K, glitches) == 0.0
    assert glitches["negative_fcr"] == 1


def test_constants_must_be_positive():
    with pytest.raises(ValidationError):
        FcrConstants(afr=0.0)


def test_distance(trip_factory):
    assert trip_distance(trip_factory([36.0] * 101)) == pytest.approx(1.0)
    assert trip_distance(trip_factory([0.0] * 50)) == 0.0
    assert trip_distance(trip_factory(list(np.linspace(0.0, 72.0, 101)))) == pytest.approx(1.0)
    assert trip_distance(trip_factory([36.0, None, None])) is None


def test_distance_scales_linearly(trip_factory):
    speeds = np.random.default_rng(0).uniform(0.0, 90.0, 200)
    base = trip_distance(trip_factory(list(speeds)))
    assert trip_distance(trip_factory(list(3.0 * speeds))) == pytest.approx(3.0 * base)


def test_fuel(trip_factory):
    assert trip_fuel(trip_factory([50.0] * 3601, fuel_rate=4.832), ICE, K) == pytest.approx(4.832)
    assert trip_fuel(trip_factory([50.0] * 10, fuel_rate=0.0), ICE, K) == 0.0
    sparse = [4.0] * 4 + [None] * 6
    assert trip_fuel(trip_factory([50.0] * 10, fuel_rate=sparse), ICE, K) is None


def test_battery(trip_factory):
    ev = dict(vehicle_type=VehicleType.EV)
    assert trip_battery(trip_factory([50.0] * 1801, hv_voltage=350.0, hv_current=20.0, **ev)) == pytest.approx(3.5)
    assert trip_battery(trip_factory([50.0] * 100, hv_voltage=350.0, hv_current=0.0, **ev)) == 0.0
    symmetric = [10.0] * 50 + [-10.0] * 50
    net = trip_battery(trip_factory([50.0] * 100, dt_s=1.0, hv_voltage=300.0, hv_current=symmetric, **ev))
    assert net is None or net == pytest.approx(0.0, abs=1e-12)


def test_battery_time_reversal(trip_factory):
    power = np.random.default_rng(1).uniform(5.0, 40.0, 300)
    forward = trip_factory([40.0] * 300, hv_voltage=300.0, hv_current=list(power))
    backward = trip_factory([40.0] * 300, hv_voltage=300.0, hv_current=list(power[::-1]))
    assert trip_battery(forward) == pytest.approx(trip_battery(backward), rel=1e-12)


def test_labels_are_invariant_to_resampling(trip_factory):
    coarse = trip_factory([45.0] * 121, dt_s=5.0, fuel_rate=3.0)
    fine = trip_factory([45.0] * 601, dt_s=1.0, fuel_rate=3.0)
    a = label_trip(coarse, ICE, K)
    b = label_trip(fine, ICE, K)
    assert a.fuel_eff_km_per_l == pytest.approx(b.fuel_eff_km_per_l, rel=1e-9)
    assert a.fuel_eff_km_per_l == pytest.approx(15.0)


def test_fuel_efficiency_label(trip_factory):
    trip = trip_factory([36.0] * 1001, fuel_rate=3.6)
    energy = label_trip(trip, ICE, K)
    assert energy.distance_km == pytest.approx(10.0)
    assert energy.fuel_l == pytest.approx(1.0)
    assert energy.fuel_eff_km_per_l == pytest.approx(10.0)
    assert energy.batt_eff_km_per_kwh is None
    assert not energy.rejected


def test_battery_efficiency_label(trip_factory):
    ev = VehicleMeta(veh_id="5", vehicle_type=VehicleType.EV)
    trip = trip_factory([25.2] * 1001, hv_voltage=250.0, hv_current=7.2, vehicle_type=VehicleType.EV)
    energy = label_trip(trip, ev, K)
    assert energy.distance_km == pytest.approx(7.0)
    assert energy.battery_kwh == pytest.approx(0.5)
    assert energy.batt_eff_km_per_kwh == pytest.approx(14.0)
    assert energy.fuel_l is None


def test_hybrid_gets_both_labels(trip_factory):
    hev = VehicleMeta(veh_id="3", vehicle_type=VehicleType.HEV, displacement_l=1.8)
    trip = trip_factory([36.0] * 1001, fuel_rate=1.8, hv_voltage=250.0, hv_current=10.0,
                        vehicle_type=VehicleType.HEV)
    energy = label_trip(trip, hev, K)
    assert energy.fuel_eff_km_per_l == pytest.approx(20.0)
    assert energy.batt_eff_km_per_kwh == pytest.approx(14.4)


def test_rejections(trip_factory):
    assert label_trip(trip_factory([36.0] * 31, fuel_rate=2.0), ICE, K).reject_reason == "min_duration"
    assert label_trip(trip_factory([9.0] * 121, fuel_rate=2.0), ICE, K).reject_reason == "min_distance"
    assert label_trip(trip_factory([36.0] * 121), ICE, K).reject_reason == "no_fuel"
    assert label_trip(trip_factory([36.0] * 121, fuel_rate=0.01), ICE, K).reject_reason == "max_fuel_eff"
    assert label_trip(trip_factory([36.0] * 121, fuel_rate=0.01), ICE, K,
                      LabelFilters(max_fuel_eff=1e6)).reject_reason is None


def test_whole_dataset_report_and_file(tmp_path, trip_factory):
    trips = [trip_factory([36.0] * 121, trip_id="1", fuel_rate=2.0),
             trip_factory([36.0] * 121, trip_id="2", day_num=40.25),
             trip_factory([36.0] * 10, trip_id="3", fuel_rate=2.0)]
    energies, report = label_trips(trips, K, LabelFilters(), threads=2)
    assert [e.trip_id for e in energies] == ["1", "2", "3"]
    assert report.labeled == 1
    assert report.rejected == {"no_fuel": 1, "min_duration": 1}
    path = tmp_path / "labeled.csv"
    write_labeled(energies, str(path))
    assert path.read_text().splitlines()[0] == ("veh_id,trip_id,vehicle_type,start_iso,month,distance_km,"
                                                "duration_s,fuel_l,battery_kwh,fuel_eff,batt_eff,reject_reason")
    assert read_labeled(str(path)) == energies


def test_alternative_units():
    units = fuel_efficiency_units(10.0)
    assert units["l_per_100km"] == pytest.approx(10.0)
    assert units["mpg"] == pytest.approx(23.52145833)
