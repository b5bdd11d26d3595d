import math
from datetime import datetime
from types import SimpleNamespace

import numpy as np
import pytest

from energy_labels import FcrConstants, label_trips
from featurize import (CLUSTER_PREFIX, ClusterModel, Task, apply_standardizer, assign_cluster, build_labeled_trips,
                       feature_names, fit_od_clusters, fit_standardizer, fit_target_scaling, read_clusters,
                       read_features, speed_features, stratified_split, time_features, write_clusters,
                       write_features)
from validation import AlignmentError, InsufficientDataError
from ved_ingest import VehicleType


def test_midnight_encoding():
    values = time_features(datetime(2018, 1, 1, 0, 0))
    assert values["hour"] == 0
    assert values["hour_sin"] == 0.0
    assert values["hour_cos"] == 1.0


def test_calendar_fields():
    values = time_features(datetime(2018, 3, 7, 18, 0))
    assert values["month"] == 3
    assert values["day_of_week"] == 2
    assert values["hour_sin"] == pytest.approx(-1.0)
    assert values["month_sin"] == pytest.approx(math.sin(2 * math.pi * 3 / 12))


def test_speed_statistics(trip_factory):
    flat = speed_features(trip_factory([10.0, 10.0, 10.0]))
    assert flat["speed_mean"] == 10.0
    assert flat["speed_std"] == 0.0
    assert flat["speed_min"] == flat["speed_max"] == flat["speed_median"] == 10.0

    ramp = speed_features(trip_factory([0.0, 10.0, 20.0], dt_s=2.0))
    assert ramp["speed_mean"] == pytest.approx(10.0)
    assert ramp["speed_std"] == pytest.approx(8.165, abs=1e-3)
    assert ramp["speed_median"] == 10.0
    assert ramp["duration_s"] == 4.0

    assert speed_features(trip_factory([5.0]))["speed_std"] == 0.0
    assert speed_features(trip_factory([None, None])) is None


def test_two_separated_groups():
    rng = np.random.default_rng(3)
    a = np.array([42.0, -83.0, 42.1, -83.1]) + rng.normal(0, 1e-3, size=(20, 4))
    b = np.array([40.0, -80.0, 40.1, -80.1]) + rng.normal(0, 1e-3, size=(20, 4))
    model = fit_od_clusters(np.vstack([a, b]), k=2, seed=0)
    labels = [assign_cluster(model, p) for p in np.vstack([a, b])]
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1
    assert labels[0] != labels[20]
    np.testing.assert_allclose(model.centroids[labels[0]], a.mean(axis=0))
    np.testing.assert_allclose(model.centroids[labels[20]], b.mean(axis=0))


def test_single_cluster_is_the_center():
    square = np.array([[0, 0, 0, 0], [0, 2, 0, 2], [2, 0, 2, 0], [2, 2, 2, 2]], dtype=float)
    model = fit_od_clusters(square, k=1, seed=0)
    np.testing.assert_allclose(model.centroids[0], [1.0, 1.0, 1.0, 1.0])


def test_inertia_never_increases_and_assignment_is_nearest():
    points = np.random.default_rng(5).uniform(0.0, 10.0, size=(50, 4))
    model = fit_od_clusters(points, k=3, seed=1)
    history = np.array(model.inertia_history)
    assert np.all(np.diff(history) <= 1e-9)
    brute = [int(np.argmin(((model.centroids - p) ** 2).sum(axis=1))) for p in points]
    assert [assign_cluster(model, p) for p in points] == brute
    direct = float(sum(((p - model.centroids[c]) ** 2).sum() for p, c in zip(points, brute)))
    assert direct == pytest.approx(history[-1])


def test_clustering_is_seeded():
    points = np.random.default_rng(9).normal(size=(40, 4))
    first = fit_od_clusters(points, k=4, seed=2)
    second = fit_od_clusters(points, k=4, seed=2)
    assert np.array_equal(first.centroids, second.centroids)


def test_too_few_distinct_points():
    points = np.array([[1.0, 1.0, 1.0, 1.0]] * 5 + [[2.0, 2.0, 2.0, 2.0]])
    with pytest.raises(InsufficientDataError, match="smaller --clusters"):
        fit_od_clusters(points, k=3)


def test_tie_goes_to_lowest_id():
    centroids = np.full((5, 4), 50.0)
    centroids[1] = [1.0, 0.0, 0.0, 0.0]
    centroids[3] = [7.0, 7.0, 7.0, 7.0]
    centroids[4] = [-1.0, 0.0, 0.0, 0.0]
    model = ClusterModel(k=5, centroids=centroids, seed=0)
    assert assign_cluster(model, np.zeros(4)) == 1
    assert assign_cluster(model, centroids[3]) == 3


def _items(months, per_month):
    return [SimpleNamespace(month=m, idx=i) for m in months for i in range(per_month)]


def test_split_rounding():
    train, test = stratified_split(_items([4], 10), 0.7, seed=0)
    assert (len(train), len(test)) == (7, 3)


def test_split_rounds_halves_up():
    train, test = stratified_split(_items([4], 15), 0.7, seed=0)
    assert (len(train), len(test)) == (11, 4)
    train, test = stratified_split(_items([4], 5), 0.5, seed=0)
    assert (len(train), len(test)) == (3, 2)


def test_split_per_month_counts():
    items = _items(range(1, 13), 10)
    train, test = stratified_split(items, 0.7, seed=4)
    assert (len(train), len(test)) == (84, 36)
    for month in range(1, 13):
        assert sum(1 for t in train if t.month == month) == 7
        assert sum(1 for t in test if t.month == month) == 3
    ids = {id(t) for t in train}
    assert ids.isdisjoint(id(t) for t in test)
    assert ids | {id(t) for t in test} == {id(t) for t in items}


def test_split_singleton_goes_to_training():
    train, test = stratified_split(_items([2], 1) + _items([3], 5), 0.7, seed=0)
    assert [t.month for t in train].count(2) == 1
    assert all(t.month != 2 for t in test)


def test_split_is_seeded():
    items = _items(range(1, 13), 7)
    assert stratified_split(items, 0.7, 3) == stratified_split(items, 0.7, 3)


def test_standardizer():
    X = np.array([[1.0, 5.0, 0.0], [2.0, 5.0, 1.0], [3.0, 5.0, 0.0]])
    names = ("a", "b", f"{CLUSTER_PREFIX}0")
    std = fit_standardizer(X, names)
    assert std.mean[0] == pytest.approx(2.0)
    assert std.scale[0] == pytest.approx(0.8165, abs=1e-4)
    assert std.dropped == ("b",)
    assert std.kept == ("a", f"{CLUSTER_PREFIX}0")
    Z = apply_standardizer(std, X, names)
    assert Z[1, 0] == pytest.approx(0.0)
    np.testing.assert_array_equal(Z[:, 1], X[:, 2])


def test_standardized_training_set_is_unit_scaled():
    X = np.random.default_rng(0).normal(3.0, 4.0, size=(200, 5))
    names = tuple(f"f{j}" for j in range(5))
    Z = apply_standardizer(fit_standardizer(X, names), X, names)
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(Z.std(axis=0), 1.0, atol=1e-9)


def test_target_scaling():
    y = np.array([10.0, 12.0, 14.0])
    scaling = fit_target_scaling(y)
    assert scaling.mean == pytest.approx(12.0)
    assert scaling.scale == pytest.approx(math.sqrt(8.0 / 3.0))
    np.testing.assert_allclose(scaling.apply(y), [-1.2247449, 0.0, 1.2247449], atol=1e-6)
    mean, var = scaling.invert(np.array([1.0]), np.array([0.5]))
    assert mean[0] == pytest.approx(12.0 + scaling.scale)
    assert var[0] == pytest.approx(0.5 * 8.0 / 3.0)
    constant = fit_target_scaling(np.full(4, 7.5))
    assert (constant.mean, constant.scale) == (7.5, 1.0)


def test_standardizer_rejects_misaligned_columns():
    std = fit_standardizer(np.eye(3), ("a", "b", "c"))
    with pytest.raises(AlignmentError):
        apply_standardizer(std, np.eye(3), ("a", "c", "b"))


def _labeled(trip_factory):
    trips = []
    for i in range(12):
        kwargs = dict(veh_id=str(1 + i % 2), trip_id=str(i + 1), day_num=30.0 * i + 0.3,
                      lat=42.0 + (i % 3), lon=-83.0 - (i % 3), oat=None if i == 0 else float(i))
        if i % 2:
            trips.append(trip_factory([40.0 + i] * 121, vehicle_type=VehicleType.HEV, fuel_rate=2.0,
                                      hv_voltage=250.0, hv_current=30.0, **kwargs))
        else:
            trips.append(trip_factory([40.0 + i] * 121, fuel_rate=2.0, **kwargs))
    energies, _ = label_trips(trips, FcrConstants())
    return trips, {(e.veh_id, e.trip_id): e for e in energies}


def test_feature_rows(trip_factory):
    trips, energies = _labeled(trip_factory)
    model = fit_od_clusters(trips, k=3, seed=0)
    rows = build_labeled_trips(trips, energies, model)
    assert len(rows) == 12 + 6
    assert all(r.feature_names == feature_names(3) for r in rows)
    for row in rows:
        block = row.features[-3:]
        assert sum(block) == 1.0
        assert all(math.isfinite(v) for v in row.features)
    hybrid = [r for r in rows if r.trip_id == "2"]
    assert [r.task for r in hybrid] == [Task.FUEL, Task.BATTERY]
    oat_index = feature_names(3).index("oat_mean")
    assert rows[0].features[oat_index] == pytest.approx(float(np.median(range(1, 12))))


def test_feature_and_cluster_files(tmp_path, trip_factory):
    trips, energies = _labeled(trip_factory)
    model = fit_od_clusters(trips, k=3, seed=0)
    rows = build_labeled_trips(trips, energies, model)
    features_path = tmp_path / "features.csv"
    write_features(rows, str(features_path))
    assert features_path.read_text().splitlines()[0].startswith(
        "veh_id,trip_id,vehicle_type,task,month,target,start_iso,hour_sin")
    assert read_features(str(features_path)) == rows

    clusters_path = tmp_path / "clusters.csv"
    write_clusters(model, str(clusters_path))
    assert clusters_path.read_text().splitlines()[0] == "# k=3,seed=0"
    back = read_clusters(str(clusters_path))
    assert back.k == 3 and back.seed == 0
    assert np.array_equal(back.centroids, model.centroids)
