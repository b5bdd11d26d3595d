import numpy as np

import figures
from eval_stats import MonthlyReport, MonthStats


def _monthly():
    months = tuple(MonthStats(month=m, n=5, mean_pred=10.0 + m / 4, mean_var=0.2 + m / 50, rmse=1.0,
                              mean_target=10.2 + m / 4) for m in (1, 2, 3, 6, 7))
    return MonthlyReport(months=months, rmse_mean=1.0, rmse_std=0.0, missing_months=(4, 5, 8, 9, 10, 11, 12))


def test_month_band_svg():
    fig = figures.month_band_figure(_monthly(), "ICE fuel", units="km/L")
    assert [t.name for t in fig.data] == ["upper", "±1.96σ", "mean prediction", "observed mean"]
    svg = figures.figure_to_svg(fig)
    assert svg.startswith("<svg ")
    assert svg.rstrip().endswith("</svg>")
    assert "<polygon" in svg
    assert "mean prediction" in svg and "observed mean" in svg
    assert ">upper<" not in svg
    assert ">Jan<" in svg and ">Dec<" in svg


def test_svg_is_deterministic(tmp_path):
    first = figures.write_svg(figures.month_band_figure(_monthly(), "EV battery"), str(tmp_path / "a" / "band.svg"))
    second = figures.write_svg(figures.month_band_figure(_monthly(), "EV battery"), str(tmp_path / "band2.svg"))
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()


def test_duration_histogram():
    fig = figures.duration_histogram_figure({"ICE": [5.0, 6.0, 12.0], "EV": [3.0, 20.0]}, bins=4)
    assert [t.name for t in fig.data] == ["EV", "ICE"]
    assert sum(fig.data[1].y) == 3
    assert fig.data[0].x == fig.data[1].x
    svg = figures.figure_to_svg(fig)
    assert svg.count("<rect") >= 2 + 8
    assert "duration [min]" in svg


def test_cluster_scatter():
    points = np.array([[42.0, -83.0, 42.1, -83.1], [42.0, -83.01, 42.1, -83.1], [40.0, -80.0, 40.1, -80.1]])
    fig = figures.cluster_scatter_figure(points, [0, 0, 1], points[[0, 2]])
    assert [t.name for t in fig.data] == ["cluster 0", "cluster 1", "centroid"]
    assert len(fig.data[0].x) == 2
    svg = figures.figure_to_svg(fig)
    assert svg.count("<circle") == 5
