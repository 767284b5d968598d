"""Round loop: bootstrap, then join -> recluster -> select -> train -> aggregate -> evaluate."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import model as mc
from . import selection as sel
from .config import ExperimentConfig
from .data import FederatedDataset, PartitionSpec, generate, load_partition_spec
from .exceptions import FedSelError, StateError, UsageError
from .training import SgdParams, evaluate, fedavg, local_train

log = logging.getLogger(__name__)

THREADS_ENV = "FEDSEL_THREADS"


@dataclass
class RoundRecord:
    round: int
    selected_ids: list
    rationale: dict
    test_accuracy: float
    test_loss: float
    train_losses: dict
    aggregated: list
    selection_time: float = 0.0
    cluster_labels: dict | None = None
    newcomers: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    participation: dict
    final_weights: np.ndarray

    @property
    def accuracies(self) -> list:
        return [r.test_accuracy for r in self.records]


class TimingResult(NamedTuple):
    mean_s: float
    min_s: float
    max_s: float
    selected_ids: list


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"{THREADS_ENV} must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _round_seed(base: int, round_no: int, stream: int) -> int:
    return int(np.random.SeedSequence([base, stream, round_no]).generate_state(1)[0])


def apply_roster_events(round_no: int, roster: dict, active: dict) -> list:
    """Activate every client whose ``joined_round`` equals ``round_no``.

    ``roster`` holds all known clients, ``active`` the ones already in the
    federation; both map client id -> :class:`ClientState`.
    """
    joined = []
    for cid in sorted(roster):
        state = roster[cid]
        if state.joined_round != round_no:
            continue
        if cid in active:
            raise StateError(f"client {cid} activated twice")
        active[cid] = state
        if round_no > 0:
            state.newcomer = True
        joined.append(cid)
    return joined


def time_selection(strategy: sel.StrategyConfig, roster, repetitions: int = 50,
                   seed: int = 0) -> TimingResult:
    """Wall-clock the selection step alone (distances, clustering, pick).

    Every repetition starts from the same rng state, so all repetitions must
    pick the same clients.
    """
    if repetitions < 10:
        raise UsageError("timing needs at least 10 repetitions")
    roster = list(roster)
    if strategy.kind == "cluster" and not all(c.has_weights for c in roster):
        raise StateError("timing a cluster strategy needs cached weights for every client")
    # one untimed call first so lazy imports and cold caches do not skew the mean
    picked = sel.select(strategy, roster, np.random.default_rng(seed)).selected_ids
    times = []
    for _ in range(repetitions):
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        decision = sel.select(strategy, roster, rng)
        times.append(time.perf_counter() - t0)
        if decision.selected_ids != picked:
            raise StateError("selection is not a pure function of its inputs")
    return TimingResult(float(np.mean(times)), float(np.min(times)), float(np.max(times)), picked)


def per_cluster_loss(records) -> dict:
    """round -> {cluster id: mean cached train loss of the cluster's members}."""
    records = list(records)
    if not records:
        return {}
    snap = [r for r in records if r.cluster_labels is not None]
    if not snap:
        raise UsageError("records carry no cluster snapshots")
    table = {}
    for r in snap:
        groups = {}
        for cid, label in r.cluster_labels.items():
            if cid in r.train_losses:
                groups.setdefault(label, []).append(r.train_losses[cid])
        table[r.round] = {label: float(np.mean(v)) for label, v in sorted(groups.items())}
    return table


class Simulation:
    """One federated experiment.

    ``dataset`` may be supplied (e.g. ingested embeddings); otherwise it is
    generated from the partition spec. ``on_round(round, active_states)`` is
    called after every round, bootstrap included.
    """

    def __init__(self, config: ExperimentConfig, dataset: FederatedDataset | None = None,
                 spec: PartitionSpec | None = None, on_round=None):
        self.config = config
        self.spec = spec if spec is not None else load_partition_spec(config.partition_spec)
        if dataset is None:
            dataset = generate(
                self.spec, config.generator,
                excluded_client_ids=config.test_set.excluded_client_ids,
                per_class_count=config.test_set.per_class_count,
            )
        self.data = dataset
        self.on_round = on_round
        self.num_classes = dataset.num_classes
        joins = {c.client_id: c.join_round for c in self.spec.clients}
        self.roster = {
            cid: sel.ClientState(cid, ds, joined_round=joins.get(cid, 0))
            for cid, ds in sorted(dataset.clients.items())
        }
        self.active = {}
        init = mc.init_model(self.num_classes, dataset.feature_dim,
                             seed=config.model.seed, scheme=config.model.scheme)
        self.global_weights = mc.flatten(init)
        self.records = []
        self._threads = thread_count()

    # -- phases ----------------------------------------------------------

    def _train(self, ids, round_no):
        params = dataclasses.replace(
            self.config.sgd, shuffle_seed=_round_seed(self.config.sgd.shuffle_seed, round_no, 1)
        )
        weights = self.global_weights.copy()
        weights.setflags(write=False)

        def job(cid):
            return local_train(weights, self.roster[cid].dataset, params, cid, self.num_classes)

        ids = sorted(ids)
        if self._threads > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=min(self._threads, len(ids))) as pool:
                updates = list(pool.map(job, ids))
        else:
            updates = [job(cid) for cid in ids]
        for u in updates:
            state = self.roster[u.client_id]
            state.latest_weights = u.weights
            state.latest_train_loss = u.train_loss
            state.participation_count += 1
            state.last_trained_round = round_no
        return updates

    def _aggregate(self, updates, newcomer_ids, round_no):
        rounds_since_join = {cid: round_no - self.roster[cid].joined_round for cid in self.roster}
        kept = sel.quarantine_filter(
            updates, newcomer_ids, self.config.strategy.quarantine_rounds, rounds_since_join
        )
        if kept:
            self.global_weights = fedavg(kept, self.config.aggregation)
        return sorted(u.client_id for u in kept)

    def _record(self, round_no, decision, aggregated, elapsed, labels, newcomers):
        acc, loss = evaluate(self.global_weights, self.data.test, self.num_classes)
        losses = {
            cid: s.latest_train_loss
            for cid, s in sorted(self.active.items())
            if s.latest_train_loss is not None
        }
        record = RoundRecord(
            round=round_no,
            selected_ids=list(decision.selected_ids),
            rationale=dict(decision.rationale),
            test_accuracy=acc,
            test_loss=loss,
            train_losses=losses,
            aggregated=aggregated,
            selection_time=elapsed,
            cluster_labels=labels,
            newcomers=newcomers,
        )
        self.records.append(record)
        if self.on_round is not None:
            self.on_round(round_no, list(self.active.values()))
        return record

    def bootstrap(self):
        apply_roster_events(0, self.roster, self.active)
        if not self.active:
            raise StateError("no founding clients (join_round 0)")
        decision = sel.initialization_schedule(self.active.values())[0]
        updates = self._train(decision.selected_ids, 0)
        aggregated = self._aggregate(updates, [], 0)
        return self._record(0, decision, aggregated, 0.0, None, [])

    def step(self, round_no: int):
        strategy = self.config.strategy
        phase = "join"
        try:
            joined = apply_roster_events(round_no, self.roster, self.active)
            phase = "select"
            active = list(self.active.values())
            rng = np.random.default_rng([self.config.seed, round_no])
            t0 = time.perf_counter()
            decision = sel.select(strategy, active, rng)
            elapsed = time.perf_counter() - t0
            labels = None
            if decision.cluster_assignment is not None:
                labels = dict(decision.cluster_assignment.labels)
                sel.update_cluster_streaks(active, decision.cluster_assignment)
            newcomers = sel.detect_newcomers(active, round_no, strategy.stability_window)
            # a joiner trains once on arrival so that it has weights and a loss
            for cid in joined:
                if cid not in decision.selected_ids:
                    decision.selected_ids.append(cid)
                    decision.rationale[cid] = "initialization"
            for cid in decision.selected_ids:
                if cid in newcomers and round_no - self.roster[cid].joined_round < strategy.quarantine_rounds:
                    decision.rationale[cid] = "newcomer_quarantined"
            phase = "train"
            updates = self._train(decision.selected_ids, round_no)
            phase = "aggregate"
            aggregated = self._aggregate(updates, newcomers, round_no)
            phase = "evaluate"
            return self._record(round_no, decision, aggregated, elapsed, labels, newcomers)
        except FedSelError as exc:
            raise type(exc)(f"round {round_no}, phase {phase}: {exc}") from exc

    def run(self) -> ExperimentResult:
        self.bootstrap()
        for r in range(1, self.config.total_rounds + 1):
            rec = self.step(r)
            log.debug("round %d acc=%.4f selected=%s", r, rec.test_accuracy, rec.selected_ids)
        return self.result()

    def result(self) -> ExperimentResult:
        participation = {cid: s.participation_count for cid, s in sorted(self.roster.items())}
        return ExperimentResult(self.config, self.records, participation, self.global_weights.copy())


def run(config: ExperimentConfig, dataset: FederatedDataset | None = None,
        spec: PartitionSpec | None = None, on_round=None) -> ExperimentResult:
    return Simulation(config, dataset=dataset, spec=spec, on_round=on_round).run()


def frozen_roster(config: ExperimentConfig, dataset: FederatedDataset | None = None):
    """Roster of every founding client after the bootstrap round (all weights cached)."""
    sim = Simulation(config, dataset=dataset)
    sim.bootstrap()
    return list(sim.active.values())
