"""Command-line entry point: ``fedsel run|timing|gridsearch|compare|gen-spec``.

Exit codes: 0 success, 2 configuration error, 3 runtime/numeric error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import re
import sys
from pathlib import Path

from . import report
from .cluster import grid_search
from .config import parse_config
from .data import shipped_spec_text
from .exceptions import FedSelError, UsageError
from .report import ArtifactIOError, emit_run_artifacts
from .selection import StrategyConfig
from .simulation import Simulation, frozen_roster, time_selection
from .svg import emit_svg

log = logging.getLogger("fedsel")


def _default_out(config, suffix=""):
    slug = re.sub(r"[^A-Za-z0-9_.=-]+", "_", config.run_name).strip("_")
    return Path("runs") / (slug + suffix)


def cmd_run(args):
    config = parse_config(args.config)
    out = Path(args.out) if args.out else _default_out(config)
    result = Simulation(config).run()
    paths = emit_run_artifacts(result, out)
    last = result.records[-1]
    print(f"{config.run_name}: {config.total_rounds} rounds, final accuracy "
          f"{last.test_accuracy:.4f}; artifacts in {paths.rounds.parent}")
    return 0


def timing_strategies(config):
    n = config.timing.select
    s = config.strategy
    return [
        StrategyConfig("random", n=n),
        StrategyConfig("highest_loss", n=n),
        StrategyConfig("cluster", k=n, metric=s.metric, linkage=s.linkage,
                       within_cluster_policy=s.within_cluster_policy),
    ]


def cmd_timing(args):
    config = parse_config(args.config)
    reps = args.repetitions or config.timing.repetitions
    roster = frozen_roster(config)
    rows = []
    for strategy in timing_strategies(config):
        if strategy.n is not None and strategy.n > len(roster):
            raise UsageError(f"cannot select {strategy.n} of {len(roster)} founding clients")
        t = time_selection(strategy, roster, reps, seed=config.seed)
        rows.append([strategy.label, len(roster), f"{t.mean_s:.6g}", f"{t.min_s:.6g}", f"{t.max_s:.6g}"])
        print(f"{strategy.label:<24} mean {t.mean_s * 1e3:8.3f} ms  "
              f"min {t.min_s * 1e3:8.3f} ms  max {t.max_s * 1e3:8.3f} ms")
    out = Path(args.out) if args.out else _default_out(config, "-timing")
    out.mkdir(parents=True, exist_ok=True)
    report._write(out / "timing.csv", report._csv_text(report.TIMING_HEADER, rows))
    return 0


def cmd_gridsearch(args):
    config = parse_config(args.config)
    gs = config.gridsearch
    # every client participates in every round, as in the runs the grid is tuned on
    full = dataclasses.replace(
        config,
        strategy=StrategyConfig("random", fraction=1.0, quarantine_rounds=0),
        total_rounds=gs.rounds,
    )
    snapshots = []

    def collect(round_no, states):
        vecs = [s.latest_weights for s in sorted(states, key=lambda s: s.client_id) if s.has_weights]
        if len(vecs) >= 2:
            snapshots.append(vecs)

    Simulation(full, on_round=collect).run()
    results = grid_search(snapshots, gs.metrics, gs.linkages, gs.k_values)
    out = Path(args.out) if args.out else _default_out(config, "-gridsearch")
    out.mkdir(parents=True, exist_ok=True)
    rows = [[r.metric, r.linkage, r.k, f"{r.score:.6g}"] for r in results]
    report._write(out / "gridsearch.csv",
                  report._csv_text(["metric", "linkage", "k", "mean_silhouette"], rows))
    print(f"{'rank':>4}  {'metric':<10} {'linkage':<9} {'k':>3}  silhouette")
    for i, r in enumerate(results[: args.top], start=1):
        print(f"{i:>4}  {r.metric:<10} {r.linkage:<9} {r.k:>3}  {r.score:.4f}")
    return 0


def cmd_compare(args):
    runs = [report.load_run(d) for d in args.dirs]
    table = report.compare_runs(runs, metric=args.metric)
    sys.stdout.write(report.summary_text(table))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report._write(out / "comparison.csv", report.summary_csv(table))
        emit_svg(
            {r.name: report.moving_average(r.accuracy, r.window) for r in runs},
            out / "accuracy.svg", title="Test accuracy (moving average)",
        )
        if all(r.participation for r in runs):
            emit_svg({r.name: r.participation for r in runs}, out / "participation.svg",
                     style="histogram")
    return 0


def cmd_gen_spec(args):
    name = "table1" if args.table1 else "table2"
    out = Path(args.out)
    try:
        out.write_text(shipped_spec_text(name), encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {out}: {exc.strerror or exc}") from exc
    print(f"wrote {name} partition to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fedsel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write its artifact set")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default runs/<name>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("timing", help="benchmark the selection step alone")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--repetitions", type=int)
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("gridsearch", help="rank clustering hyperparameters by silhouette")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("compare", help="summarise several run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--metric", choices=report.SUMMARY_COLUMNS)
    p.add_argument("--out", help="also write comparison.csv and charts here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-spec", help="write a shipped partition spec")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--table1", action="store_true")
    which.add_argument("--table2", action="store_true")
    p.add_argument("out")
    p.set_defaults(func=cmd_gen_spec)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedSelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
