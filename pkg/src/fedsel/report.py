"""CSV artifacts of a run, moving averages and multi-run comparison."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import emit_config
from .exceptions import FedSelError, UsageError
from .svg import emit_svg

SUMMARY_COLUMNS = (
    "final_accuracy",
    "final_ma_accuracy",
    "best_accuracy",
    "rounds_to_90pct",
    "mean_selection_time_s",
)


class ArtifactIOError(FedSelError, OSError):
    exit_code = 4


@dataclass
class RunArtifactSet:
    rounds: Path
    participation: Path
    timing: Path
    config: Path
    clusters: Path | None = None
    accuracy_svg: Path | None = None
    participation_svg: Path | None = None


def moving_average(series, window: int = 5) -> list:
    """Trailing mean; the first ``window - 1`` points average what is available."""
    if window < 1:
        raise UsageError("window must be >= 1")
    values = [float(v) for v in series]
    if window == 1:
        return values
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1):i + 1]
        # averaging offsets from the first point keeps constant windows exact
        ref = chunk[0]
        out.append(ref + math.fsum(v - ref for v in chunk) / len(chunk))
    return out


def rounds_to_fraction(series, fraction: float = 0.9) -> int:
    """1-based index of the first point reaching ``fraction`` of the last point."""
    if not series:
        raise UsageError("empty series")
    target = fraction * series[-1]
    for i, v in enumerate(series):
        if v >= target:
            return i + 1
    return len(series)


def _g(x: float) -> str:
    return f"{x:.6g}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def rounds_csv(result) -> str:
    with_time = result.config.record_selection_time
    rows = [
        [
            r.round,
            ";".join(str(i) for i in r.selected_ids),
            _g(r.test_accuracy),
            _g(r.test_loss),
            _g(r.selection_time) if with_time else "",
        ]
        for r in result.records
    ]
    return _csv_text(["round", "selected_ids", "test_accuracy", "test_loss", "selection_time_s"], rows)


def participation_csv(result) -> str:
    return _csv_text(["client_id", "count"], sorted(result.participation.items()))


def clusters_csv(result) -> str | None:
    rows = [
        [r.round, cid, label]
        for r in result.records
        if r.cluster_labels is not None
        for cid, label in sorted(r.cluster_labels.items())
    ]
    if not rows:
        return None
    return _csv_text(["round", "client_id", "cluster_id"], rows)


def timing_rows(result):
    times = [r.selection_time for r in result.records if r.round > 0]
    n_clients = max(len(r.train_losses) for r in result.records)
    return [[result.config.strategy.label, n_clients, _g(np.mean(times)), _g(min(times)), _g(max(times))]]


TIMING_HEADER = ["strategy", "n_clients", "mean_s", "min_s", "max_s"]


def emit_csv(result, directory) -> RunArtifactSet:
    """Write rounds/participation/clusters/timing CSVs and the config echo."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create {d}: {exc.strerror or exc}") from exc
    paths = RunArtifactSet(
        rounds=_write(d / "rounds.csv", rounds_csv(result)),
        participation=_write(d / "participation.csv", participation_csv(result)),
        timing=_write(d / "timing.csv", _csv_text(TIMING_HEADER, timing_rows(result))),
        config=_write(d / "config.json", emit_config(result.config)),
    )
    clusters = clusters_csv(result)
    if clusters is not None:
        paths.clusters = _write(d / "clusters.csv", clusters)
    return paths


def emit_run_artifacts(result, directory) -> RunArtifactSet:
    """CSV artifacts plus the accuracy curve and participation histogram."""
    paths = emit_csv(result, directory)
    d = Path(directory)
    window = result.config.moving_average_window
    acc = [r.test_accuracy for r in result.records if r.round > 0]
    name = result.config.run_name
    try:
        paths.accuracy_svg = emit_svg(
            {name: moving_average(acc, window)}, d / "accuracy.svg",
            title=f"Test accuracy (moving average, window {window})",
        )
        paths.participation_svg = emit_svg(
            result.participation, d / "participation.svg", style="histogram",
            title=f"Participation per client: {name}",
        )
    except OSError as exc:
        raise ArtifactIOError(f"cannot write charts in {d}: {exc}") from exc
    return paths


# -- comparison ----------------------------------------------------------------

@dataclass
class RunSeries:
    name: str
    accuracy: list
    mean_selection_time: float
    window: int
    participation: dict


def load_run(directory) -> RunSeries:
    d = Path(directory)
    try:
        with (d / "rounds.csv").open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        window, name = 5, d.name
        if (d / "config.json").exists():
            cfg = json.loads((d / "config.json").read_text(encoding="utf-8"))
            window = cfg.get("moving_average_window", 5)
        mean_time = float("nan")
        if (d / "timing.csv").exists():
            with (d / "timing.csv").open(newline="", encoding="utf-8") as fh:
                trows = list(csv.DictReader(fh))
            if trows:
                mean_time = float(trows[0]["mean_s"])
        participation = {}
        if (d / "participation.csv").exists():
            with (d / "participation.csv").open(newline="", encoding="utf-8") as fh:
                participation = {int(r["client_id"]): int(r["count"]) for r in csv.DictReader(fh)}
    except OSError as exc:
        raise ArtifactIOError(f"cannot read run in {d}: {exc.strerror or exc}") from exc
    acc = [float(r["test_accuracy"]) for r in rows if int(r["round"]) > 0]
    return RunSeries(name, acc, mean_time, window, participation)


def summarize(run: RunSeries) -> dict:
    ma = moving_average(run.accuracy, run.window)
    return {
        "final_accuracy": run.accuracy[-1],
        "final_ma_accuracy": ma[-1],
        "best_accuracy": max(run.accuracy),
        "rounds_to_90pct": rounds_to_fraction(ma, 0.9),
        "mean_selection_time_s": run.mean_selection_time,
    }


def compare_runs(runs, metric: str | None = None) -> dict:
    """Summary row per run, keyed by run name.

    ``runs`` holds run directories or :class:`RunSeries`. All runs must
    cover the same number of rounds.
    """
    runs = [r if isinstance(r, RunSeries) else load_run(r) for r in runs]
    if len(runs) < 2:
        raise UsageError("comparison needs at least two runs")
    lengths = {len(r.accuracy) for r in runs}
    if len(lengths) != 1:
        raise UsageError(f"runs cover different numbers of rounds: {sorted(lengths)}")
    if metric is not None and metric not in SUMMARY_COLUMNS:
        raise UsageError(f"unknown metric {metric!r}; choose from {SUMMARY_COLUMNS}")
    names = [r.name for r in runs]
    if len(set(names)) != len(names):
        # disambiguate equal directory names by position
        for i, r in enumerate(runs):
            r.name = f"{r.name}#{i}"
    table = {}
    for r in runs:
        row = summarize(r)
        table[r.name] = {metric: row[metric]} if metric else row
    return table


def summary_csv(table: dict) -> str:
    columns = list(next(iter(table.values())))
    rows = [
        [name] + [v if isinstance(v, int) else _g(v) for v in (row[c] for c in columns)]
        for name, row in sorted(table.items())
    ]
    return _csv_text(["run"] + columns, rows)


def summary_text(table: dict) -> str:
    columns = list(next(iter(table.values())))
    width = max(len("run"), *(len(n) for n in table))
    lines = ["  ".join([f"{'run':<{width}}"] + [f"{c:>22}" for c in columns])]
    for name, row in sorted(table.items()):
        cells = [f"{row[c]:>22}" if isinstance(row[c], int) else f"{row[c]:>22.4f}" for c in columns]
        lines.append("  ".join([f"{name:<{width}}"] + cells))
    return "\n".join(lines) + "\n"
