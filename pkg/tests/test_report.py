import csv
import re

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from fedsel import report, svg
from fedsel.config import ExperimentConfig
from fedsel.data import GeneratorParams
from fedsel.exceptions import UsageError
from fedsel.selection import StrategyConfig
from fedsel.simulation import run


@pytest.fixture(scope="module")
def cluster_result():
    cfg = ExperimentConfig("table2", StrategyConfig("cluster", k=3), generator=GeneratorParams(feature_dim=8),
                           total_rounds=6)
    return run(cfg)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- moving average --------------------------------------------------------

def test_moving_average_examples():
    assert report.moving_average([1, 2, 3, 4, 5], 5) == [1, 1.5, 2, 2.5, 3]
    assert report.moving_average([0.3, 0.1], 1) == [0.3, 0.1]
    with pytest.raises(UsageError):
        report.moving_average([1.0], 0)


@settings(max_examples=60, deadline=None)
@given(c=st.floats(-1e6, 1e6, allow_nan=False), n=st.integers(0, 40), w=st.integers(1, 10))
def test_moving_average_constant_exact(c, n, w):
    assert report.moving_average([c] * n, w) == [c] * n


@settings(max_examples=60, deadline=None)
@given(xs=st.lists(st.floats(0, 1), max_size=50), w=st.integers(1, 8))
def test_moving_average_matches_definition(xs, w):
    out = report.moving_average(xs, w)
    assert len(out) == len(xs)
    for i, v in enumerate(out):
        assert v == pytest.approx(np.mean(xs[max(0, i - w + 1):i + 1]), abs=1e-12)


def test_rounds_to_fraction():
    assert report.rounds_to_fraction([0.1, 0.5, 0.95, 1.0]) == 3
    assert report.rounds_to_fraction([1.0]) == 1
    with pytest.raises(UsageError):
        report.rounds_to_fraction([])


# -- CSV artifacts ---------------------------------------------------------

def test_emit_csv_columns_and_consistency(tmp_path, cluster_result):
    paths = report.emit_csv(cluster_result, tmp_path)
    rounds = read_csv(paths.rounds)
    assert rounds[0] == ["round", "selected_ids", "test_accuracy", "test_loss", "selection_time_s"]
    assert len(rounds) == 1 + 7
    assert rounds[1][1] == ";".join(str(i) for i in range(1, 17))
    assert all(r[4] == "" for r in rounds[1:])
    part = read_csv(paths.participation)
    assert part[0] == ["client_id", "count"]
    selected = sum(len(r[1].split(";")) for r in rounds[1:])
    assert sum(int(r[1]) for r in part[1:]) == selected
    clusters = read_csv(paths.clusters)
    assert clusters[0] == ["round", "client_id", "cluster_id"]
    assert len(clusters) == 1 + 6 * 16
    timing = read_csv(paths.timing)
    assert timing[0] == ["strategy", "n_clients", "mean_s", "min_s", "max_s"]
    assert timing[1][:2] == ["cluster(k=3)", "16"]
    assert paths.config.exists()


def test_float_format_six_significant(tmp_path, cluster_result):
    rows = read_csv(report.emit_csv(cluster_result, tmp_path).rounds)
    for r in rows[1:]:
        assert r[2] == f"{float(r[2]):.6g}"
        assert len(re.sub(r"[^0-9]", "", r[3].split("e")[0]).lstrip("0")) <= 6


def test_reemission_byte_identical(tmp_path, cluster_result):
    a = report.emit_run_artifacts(cluster_result, tmp_path / "a")
    b = report.emit_run_artifacts(cluster_result, tmp_path / "b")
    for name in ("rounds", "participation", "clusters", "config", "accuracy_svg", "participation_svg"):
        assert getattr(a, name).read_bytes() == getattr(b, name).read_bytes()


def test_selection_time_column_opt_in(tmp_path):
    cfg = ExperimentConfig("table2", StrategyConfig("random", n=2), generator=GeneratorParams(feature_dim=8),
                           total_rounds=2, record_selection_time=True)
    rows = read_csv(report.emit_csv(run(cfg), tmp_path).rounds)
    assert all(float(r[4]) >= 0 for r in rows[1:])
    assert report.emit_csv(run(cfg), tmp_path).clusters is None


def test_unwritable_directory(tmp_path, cluster_result):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(report.ArtifactIOError, match="file"):
        report.emit_csv(cluster_result, blocker / "sub")


# -- comparison ------------------------------------------------------------

def series(name, acc, t=0.001):
    return report.RunSeries(name, list(acc), t, 5, {})


def test_compare_self_copy_identical(tmp_path, cluster_result):
    report.emit_csv(cluster_result, tmp_path / "a")
    report.emit_csv(cluster_result, tmp_path / "b")
    table = report.compare_runs([tmp_path / "a", tmp_path / "b"])
    assert table["a"] == table["b"]
    assert list(table["a"]) == list(report.SUMMARY_COLUMNS)


def test_dominating_run_reaches_target_sooner():
    rng = np.random.default_rng(0)
    base = np.clip(np.cumsum(rng.uniform(0, 0.02, 60)), 0, 0.8)
    table = report.compare_runs([series("A", base + 0.1), series("B", base)])
    assert table["A"]["rounds_to_90pct"] <= table["B"]["rounds_to_90pct"]
    assert table["A"]["final_accuracy"] > table["B"]["final_accuracy"]


def test_compare_single_metric_and_errors():
    a, b = series("A", [0.1, 0.2]), series("B", [0.3, 0.4])
    table = report.compare_runs([a, b], metric="best_accuracy")
    assert table == {"A": {"best_accuracy": 0.2}, "B": {"best_accuracy": 0.4}}
    with pytest.raises(UsageError):
        report.compare_runs([a, series("C", [0.1])])
    with pytest.raises(UsageError):
        report.compare_runs([a])
    with pytest.raises(UsageError):
        report.compare_runs([a, b], metric="median")


def test_compare_permutation_invariant():
    runs = [series("A", [0.1, 0.5]), series("B", [0.2, 0.3]), series("C", [0.4, 0.4])]
    assert report.compare_runs(runs) == report.compare_runs(runs[::-1])
    text = report.summary_text(report.compare_runs(runs))
    assert text.splitlines()[0].split()[0] == "run" and len(text.splitlines()) == 4
    assert report.summary_csv(report.compare_runs(runs)).startswith("run,final_accuracy,")


# -- SVG -------------------------------------------------------------------

def test_line_chart_structure():
    text = svg.line_chart({"random(n=5)": [0.1, 0.4, 0.6], "cluster(k=5)": [0.2, 0.5, 0.7]})
    assert text.count("<polyline") == 2
    legend = text.split('<g class="legend">')[1].split("</g>")[0]
    assert legend.count("<text") == 2 and "cluster(k=5)" in legend
    assert 'viewBox="0 0 800 500"' in text
    assert "http" not in text.replace('xmlns="http://www.w3.org/2000/svg"', "")


def test_histogram_bars():
    counts = {cid: cid % 5 for cid in range(1, 17)}
    text = svg.histogram(counts)
    assert text.count('class="bar"') == 16
    grouped = svg.histogram({"a": counts, "b": counts})
    assert grouped.count('class="bar"') == 32


def test_svg_deterministic_and_errors(tmp_path):
    data = {"s": [0.1, 0.2]}
    p1 = svg.emit_svg(data, tmp_path / "a.svg")
    p2 = svg.emit_svg(data, tmp_path / "b.svg")
    assert p1.read_bytes() == p2.read_bytes()
    for bad in ({}, {"s": []}):
        with pytest.raises(UsageError):
            svg.emit_svg(bad, tmp_path / "c.svg")
    with pytest.raises(UsageError):
        svg.emit_svg({}, tmp_path / "d.svg", style="histogram")
    with pytest.raises(UsageError):
        svg.emit_svg(data, tmp_path / "e.svg", style="pie")


@settings(max_examples=50, deadline=None)
@given(lo=st.floats(-1e4, 1e4), span=st.floats(0, 1e4))
@example(lo=0.0, span=5e-324)
@example(lo=1e4, span=1e-12)
@example(lo=-5e-324, span=0.0)
def test_axis_range_covers_data(lo, span):
    a, b = svg._nice_range(lo, lo + span)
    assert a <= lo and b >= lo + span
