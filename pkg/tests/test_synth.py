import filecmp
import os

import numpy as np
import pandas as pd
import pytest
from scipy.stats import spearmanr

import config
import ensemble
import synth
from energy_labels import FcrConstants, energies_by_key, label_trips
from ensemble import EnsembleConfig
from eval_stats import coverage, rmse
from featurize import Task, build_labeled_trips, fit_od_clusters, select_task, stratified_split
from synth import SynthConfig, generate, noisiest_months, read_truth
from validation import ValidationError
from ved_ingest import VehicleType, assemble_trips, parse_dynamic_files, parse_static_files


def test_generation_is_byte_stable(tmp_path, tiny_fleet):
    cfg, first = tiny_fleet
    second = generate(cfg, str(tmp_path))
    assert [os.path.basename(p) for p in second.dynamic_paths] == [os.path.basename(p) for p in first.dynamic_paths]
    assert second.n_trips == first.n_trips and second.n_samples == first.n_samples
    for a, b in zip(first.dynamic_paths + [first.static_path, first.truth_path],
                    second.dynamic_paths + [second.static_path, second.truth_path]):
        assert filecmp.cmp(a, b, shallow=False)


def test_weekly_files_are_named_by_their_start_date(tiny_fleet):
    _, result = tiny_fleet
    assert os.path.basename(result.dynamic_paths[0]) == "VED_171101_week.csv"
    assert synth.week_file_name("2017-11-01", 2) == "VED_171115_week.csv"


def test_rows_carry_one_fuel_channel(tiny_fleet):
    _, result = tiny_fleet
    frame = pd.concat([pd.read_csv(p, dtype=str, keep_default_na=False) for p in result.dynamic_paths])
    columns = config.DYNAMIC_COLUMN_MAP
    measured = frame[frame[columns["fuel_rate"]] != ""]
    assert len(measured) > 0
    assert (measured[columns["maf"]] == "").all()
    assert (measured[columns["abs_load"]] == "").all()
    assert len(frame) == result.n_samples


def test_output_parses_cleanly_and_relabels_to_the_truth(tiny_fleet):
    cfg, result = tiny_fleet
    dynamic = parse_dynamic_files(result.dynamic_paths)
    assert dynamic.skipped.count == 0
    static = parse_static_files([result.static_path])
    assert sorted(v.vehicle_type.value for v in static.vehicles.values()) == ["EV", "HEV", "ICE", "PHEV"]
    trips = assemble_trips(dynamic.groups, static.vehicles, cfg.epoch_date).trips
    assert len(trips) == result.n_trips

    energies, report = label_trips(trips, FcrConstants())
    truth = read_truth(result.truth_path)
    assert report.labeled > 0
    for energy in energies:
        true_fuel, true_batt = truth[(energy.veh_id, energy.trip_id)]
        if energy.fuel_eff_km_per_l is not None:
            assert energy.fuel_eff_km_per_l == pytest.approx(true_fuel, rel=0.02)
        if energy.batt_eff_km_per_kwh is not None:
            assert energy.batt_eff_km_per_kwh == pytest.approx(true_batt, rel=0.02)


def test_truth_follows_the_vehicle_type(tiny_fleet):
    _, result = tiny_fleet
    static = parse_static_files([result.static_path]).vehicles
    for (veh_id, _), (fuel, batt) in read_truth(result.truth_path).items():
        kind = static[veh_id].vehicle_type.value
        assert (fuel is not None) == (kind in ("ICE", "HEV", "PHEV"))
        assert (batt is not None) == (kind in ("HEV", "PHEV", "EV"))


def test_noisiest_months():
    assert noisiest_months(SynthConfig())[:3] == [1, 11, 12]
    flat = SynthConfig(noise_by_month=(1.0,) * 12)
    assert noisiest_months(flat) == list(range(1, 13))


def test_noise_scales_with_the_base_efficiency():
    cfg = SynthConfig()
    assert cfg.noise_sd(1, 12.0) == pytest.approx(1.6)
    assert cfg.noise_sd(1, 6.0) == pytest.approx(0.8)
    assert SynthConfig(noise_scale=0.0).noise_sd(1, 12.0) == 0.0


def test_planted_efficiency_peaks_at_the_eco_point():
    cfg = SynthConfig()
    peak = synth.planted_efficiency(10.0, synth.ECO_OAT_C, cfg.optimal_speed, cfg)
    assert peak == 10.0
    assert synth.planted_efficiency(10.0, -10.0, cfg.optimal_speed, cfg) < peak
    assert synth.planted_efficiency(10.0, synth.ECO_OAT_C, 110.0, cfg) < peak
    assert synth.seasonal_oat(20) < synth.seasonal_oat(200)


@pytest.mark.parametrize("overrides", [
    dict(days=0),
    dict(vehicles={"ICE": 0}),
    dict(vehicles={"TRUCK": 1}),
    dict(noise_by_month=(1.0,) * 11),
    dict(fuel_rate_frac=0.8, maf_frac=0.5),
])
def test_invalid_configuration(overrides):
    with pytest.raises((ValidationError, ValueError)):
        SynthConfig(**overrides)


@pytest.fixture(scope="module")
def year_of_ice_trips(tmp_path_factory):
    """About 2,000 noisy trips from three vehicle types over a year; the ICE fuel task split 70/30"""
    cfg = SynthConfig(vehicles={"ICE": 6, "HEV": 3, "PHEV": 3}, trips_per_day=2000 / (12 * 365), seed=5)
    result = generate(cfg, str(tmp_path_factory.mktemp("year")))
    dynamic = parse_dynamic_files(result.dynamic_paths)
    static = parse_static_files([result.static_path])
    trips = assemble_trips(dynamic.groups, static.vehicles, cfg.epoch_date).trips
    energies, _ = label_trips(trips, FcrConstants())
    by_key = energies_by_key(energies)
    labeled = [t for t in trips if t.key in by_key and not by_key[t.key].rejected]
    clusters = fit_od_clusters(labeled, config.OD_CLUSTERS, cfg.seed)
    rows = select_task(build_labeled_trips(trips, by_key, clusters), VehicleType.ICE, Task.FUEL)
    train, test = stratified_split(rows, config.TRAIN_FRAC, cfg.seed)
    return cfg, train, test


@pytest.mark.slow
def test_ensemble_recovers_the_planted_noise(year_of_ice_trips):
    cfg, train, test = year_of_ice_trips
    model = ensemble.train(train, EnsembleConfig(members=10, epochs=40, batch_size=100, lr=3e-3, seed=0))
    records = ensemble.predict(model, test)
    means = np.array([r.pred_mean for r in records])
    variances = np.array([r.pred_var for r in records])
    targets = np.array([r.target for r in records])
    months = np.array([r.month for r in records])

    base = cfg.base_fuel_eff["ICE"]
    planted_sd = np.sqrt(np.mean([cfg.noise_sd(m, base) ** 2 for m in months]))
    assert rmse(means, targets) <= 1.2 * planted_sd
    assert 0.90 <= coverage(means, variances, targets, 0.95) <= 0.98

    sigma = np.sqrt(variances)
    by_month = {m: sigma[months == m].mean() for m in np.unique(months)}
    noise = {m: cfg.noise_by_month[m - 1] for m in by_month}
    loud = [by_month[m] for m in by_month if noise[m] == max(noise.values())]
    quiet = [by_month[m] for m in by_month if noise[m] == min(noise.values())]
    assert min(loud) > np.mean(quiet)
    assert spearmanr(list(noise.values()), list(by_month.values())).correlation > 0.5
