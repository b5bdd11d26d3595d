import itertools
import json
from dataclasses import replace
from datetime import datetime

import numpy as np
import pandas as pd
import pytest
from scipy.stats import rankdata

import eval_stats
from ensemble import PredictionRecord
from eval_stats import coverage, monthly_report, r2, rmse, wilcoxon_one_tailed
from featurize import Task
from validation import IdenticalModelsError, ValidationError
from ved_ingest import VehicleType


def record(i, month, target, mean, var=None, task=Task.FUEL):
    return PredictionRecord(veh_id="1", trip_id=str(i), start_datetime=datetime(2018, month, 1, 8, i % 60),
                            month=month, task=task, target=target, pred_mean=mean, pred_var=var)


def test_rmse():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.53553, abs=1e-5)
    preds, targets = np.array([1.0, -2.0, 4.0]), np.array([0.5, 1.0, 3.0])
    assert rmse(preds + 100.0, targets + 100.0) == pytest.approx(rmse(preds, targets))
    assert rmse(preds, targets) ** 2 == pytest.approx(sum((p - t) ** 2 for p, t in zip(preds, targets)) / 3)


def test_rmse_rejects_mismatched_input():
    with pytest.raises(ValidationError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValidationError):
        rmse([], [])


def test_r2():
    assert r2([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert r2([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == 0.0
    assert r2([1.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == pytest.approx(0.5)
    assert r2([1.0, 1.0], [4.0, 4.0]) is None
    preds, targets = np.array([1.0, 2.5, 2.0, 7.0]), np.array([1.5, 2.0, 3.0, 6.0])
    assert r2(3.0 * preds - 4.0, 3.0 * targets - 4.0) == pytest.approx(r2(preds, targets))


def test_exact_p_when_every_sign_favors_a():
    a = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    b = a + np.array([0.5, 0.1, 0.9, 0.3, 0.7])
    result = wilcoxon_one_tailed(a, b)
    assert result.method == "exact"
    assert result.p_value == pytest.approx(1 / 32)
    assert result.w_minus == 15.0 and result.w_plus == 0.0


def test_identical_errors():
    with pytest.raises(IdenticalModelsError, match="models identical on this set"):
        wilcoxon_one_tailed([1.0, 2.0], [1.0, 2.0])


def _brute_force_p(d):
    ranks = rankdata(np.abs(d))
    observed = ranks[d < 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        hits += np.dot(signs, ranks) >= observed
    return hits / 2 ** len(d)


@pytest.mark.parametrize("seed", range(100))
def test_exact_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 13))
    a = rng.uniform(0.0, 3.0, n)
    b = a + rng.normal(0.3, 1.0, n)
    exact = wilcoxon_one_tailed(a, b, method="exact")
    assert exact.p_value == _brute_force_p(a - b)


@pytest.mark.parametrize("seed", range(100))
def test_normal_approximation_is_close_near_the_cutoff(seed):
    n = 8 + seed % 5
    rng = np.random.default_rng(100 + seed)
    a = rng.uniform(0.0, 3.0, n)
    b = a + rng.normal(0.3, 1.0, n)
    exact = wilcoxon_one_tailed(a, b, method="exact")
    approx = wilcoxon_one_tailed(a, b, method="normal")
    assert abs(approx.p_value - exact.p_value) <= 0.02


def test_tail_is_taken_from_the_other_sum_when_swapped():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=9)
    b = rng.uniform(size=9)
    forward = wilcoxon_one_tailed(a, b, method="exact")
    swapped = wilcoxon_one_tailed(b, a, method="exact")
    assert forward.w_minus == swapped.w_plus
    ranks = rankdata(np.abs(b - a))
    assert forward.p_value == eval_stats.exact_upper_tail(ranks, swapped.w_plus)


def test_large_samples_use_the_normal_path():
    rng = np.random.default_rng(5)
    result = wilcoxon_one_tailed(rng.uniform(size=40), rng.uniform(size=40) + 0.5)
    assert result.method == "normal"
    assert result.p_value < 0.01


def test_monthly_report():
    single = monthly_report([record(1, 3, 1.0, 2.0), record(2, 3, 1.0, 0.0)])
    assert single.rmse_std == 0.0
    assert 3 not in single.missing_months and len(single.missing_months) == 11

    two = monthly_report([record(1, 1, 0.0, 2.0), record(2, 1, 0.0, -2.0),
                          record(3, 2, 0.0, 4.0), record(4, 2, 0.0, 4.0)])
    assert two.rmse_mean == pytest.approx(3.0)
    assert two.rmse_std == pytest.approx(1.0)
    assert [m.rmse for m in two.months] == [pytest.approx(2.0), pytest.approx(4.0)]
    assert two.missing_months == tuple(range(3, 13))


def test_coverage_limits():
    targets = np.array([1.0, 5.0, -3.0])
    assert coverage(np.zeros(3), np.full(3, 1e12), targets) == 1.0
    assert coverage(np.zeros(3), np.full(3, 1e-6), targets) == 0.0


def test_coverage_is_calibrated_for_gaussian_targets():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=100_000)
    var = rng.uniform(0.5, 2.0, 100_000)
    y = rng.normal(mu, np.sqrt(var))
    assert coverage(mu, var, y, 0.95) == pytest.approx(0.95, abs=0.005)


def _predictions():
    rng = np.random.default_rng(8)
    targets = rng.uniform(8.0, 16.0, 24)
    months = [1 + i % 12 for i in range(24)]
    enn = [record(i, m, t, t + rng.normal(0, 0.2), 0.05) for i, (m, t) in enumerate(zip(months, targets))]
    lr = [record(i, m, t, t + rng.normal(0, 2.0)) for i, (m, t) in enumerate(zip(months, targets))]
    copy = [replace(r) for r in enn]
    return {"ENN": enn, "LR": lr, "COPY": copy}


def test_task_report():
    report = eval_stats.evaluate_task(_predictions(), VehicleType.ICE, Task.FUEL)
    assert report.label == "ICE_fuel"
    assert report.n_test == 24
    assert set(report.models) == {"ENN", "LR", "COPY"}
    assert report.models["ENN"].coverage is not None
    assert report.models["LR"].coverage is None
    assert report.wilcoxon["ENN-LR"].p_value < 0.05
    assert report.wilcoxon["ENN-COPY"] is None
    assert report.notes["ENN-COPY"] == "models identical on this set"
    assert report.units["km_per_l"] == pytest.approx(np.mean([r.target for r in _predictions()["ENN"]]))


def test_report_files(tmp_path):
    report = eval_stats.evaluate_task(_predictions(), VehicleType.ICE, Task.FUEL)
    json_path, csv_path = eval_stats.write_report([report], str(tmp_path), extras={"external": []})
    document = eval_stats.read_report(json_path)
    assert set(document["tasks"]) == {"ICE_fuel"}
    assert document["tasks"]["ICE_fuel"]["wilcoxon"]["ENN-COPY"] is None
    assert "monthly RMSE" in document["rmse_mean_std"]
    table = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    assert list(table.columns) == ["table", "model", "ICE_fuel"]
    rmse_row = table[(table["table"] == "rmse") & (table["model"] == "ENN")]["ICE_fuel"].iloc[0]
    assert " ± " in rmse_row
    p_row = table[(table["table"] == "p_value") & (table["model"] == "ENN-COPY")]["ICE_fuel"].iloc[0]
    assert p_row == "models identical on this set"
    with open(json_path, encoding="utf-8") as handle:
        assert json.load(handle) == document
