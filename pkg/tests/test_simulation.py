import dataclasses
import math

import numpy as np
import pytest

from conftest import blob_dataset
from fedsel.config import ExperimentConfig
from fedsel.data import GeneratorParams, parse_partition_spec
from fedsel.exceptions import StateError, UsageError
from fedsel.model import SoftmaxRegression
from fedsel.report import rounds_csv
from fedsel.selection import ClientState, StrategyConfig
from fedsel.simulation import (
    Simulation,
    apply_roster_events,
    frozen_roster,
    per_cluster_loss,
    run,
    thread_count,
    time_selection,
)
from fedsel.training import SgdParams

SMALL = GeneratorParams(feature_dim=8)


def small_config(strategy, spec="table2", rounds=5, **kw):
    return ExperimentConfig(spec, strategy, generator=SMALL, total_rounds=rounds, **kw)


def test_two_client_run():
    fd = blob_dataset(n_clients=2)
    spec = parse_partition_spec("num_classes 2\n1 a 0:30,1:30 0\n2 a 0:30,1:30 0\n")
    cfg = ExperimentConfig("inline", StrategyConfig("random", n=2), total_rounds=1)
    res = run(cfg, dataset=fd, spec=spec)
    assert [r.round for r in res.records] == [0, 1]
    assert res.participation == {1: 2, 2: 2}
    assert res.records[0].rationale == {1: "initialization", 2: "initialization"}


def test_participation_matches_records():
    res = run(small_config(StrategyConfig("cluster", k=3), rounds=8))
    counted = {}
    for r in res.records:
        for cid in r.selected_ids:
            counted[cid] = counted.get(cid, 0) + 1
    assert counted == {cid: n for cid, n in res.participation.items() if n}
    assert sum(res.participation.values()) == sum(len(r.selected_ids) for r in res.records)
    assert [r.round for r in res.records] == list(range(9))


def test_selection_sizes_per_strategy():
    res = run(small_config(StrategyConfig("random", fraction=0.2), rounds=4))
    assert all(len(r.selected_ids) == math.ceil(0.2 * 16) for r in res.records[1:])
    res = run(small_config(StrategyConfig("cluster", k=5), rounds=4))
    for r in res.records[1:]:
        assert len(r.selected_ids) == 5
        assert sorted(r.cluster_labels) == list(range(1, 17))
        assert set(r.rationale.values()) == {"cluster_representative"}
    res = run(small_config(StrategyConfig("highest_loss", n=5), rounds=4))
    for prev, r in zip(res.records, res.records[1:]):
        top = sorted(prev.train_losses, key=lambda c: (-prev.train_losses[c], c))[:5]
        assert r.selected_ids == top


def test_bootstrap_populates_every_client():
    sim = Simulation(small_config(StrategyConfig("random", n=3)))
    rec = sim.bootstrap()
    assert rec.selected_ids == list(range(1, 17))
    assert all(s.has_weights and s.latest_train_loss is not None for s in sim.active.values())


def test_determinism_and_thread_independence(monkeypatch):
    cfg = small_config(StrategyConfig("cluster", k=4), rounds=6)
    monkeypatch.setenv("FEDSEL_THREADS", "1")
    a = run(cfg)
    monkeypatch.setenv("FEDSEL_THREADS", "4")
    b = run(cfg)
    assert rounds_csv(a) == rounds_csv(b)
    assert a.final_weights.tobytes() == b.final_weights.tobytes()
    assert [r.cluster_labels for r in a.records] == [r.cluster_labels for r in b.records]
    c = run(cfg.with_seed(1))
    assert c.final_weights.tobytes() != a.final_weights.tobytes()


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("FEDSEL_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("FEDSEL_THREADS", "0")
    assert thread_count() >= 1
    monkeypatch.setenv("FEDSEL_THREADS", "many")
    with pytest.raises(UsageError):
        thread_count()


# -- roster events and newcomers -------------------------------------------

def test_roster_events():
    roster = {cid: ClientState(cid, joined_round=0) for cid in range(1, 9)}
    roster[9] = ClientState(9, joined_round=10)
    roster[10] = ClientState(10, joined_round=10**6)
    active = {}
    apply_roster_events(0, roster, active)
    for r in range(1, 10):
        assert apply_roster_events(r, roster, active) == []
    assert len(active) == 8
    assert apply_roster_events(10, roster, active) == [9]
    assert len(active) == 9 and roster[9].newcomer
    with pytest.raises(StateError):
        apply_roster_events(10, roster, active)


def test_newcomer_join_and_quarantine():
    cfg = small_config(StrategyConfig("cluster", k=4, quarantine_rounds=1), spec="newcomers", rounds=24)
    res = run(cfg)
    by_round = {r.round: r for r in res.records}
    assert len(by_round[19].train_losses) == 8
    join = by_round[20]
    joiners = [9, 10, 11, 12]
    assert all(join.rationale[c] == "newcomer_quarantined" for c in joiners)
    assert not set(joiners) & set(join.aggregated)
    assert set(joiners) <= set(join.newcomers)
    assert len([c for c in join.selected_ids if join.rationale[c] != "newcomer_quarantined"]) == 4
    # cached weights exist from the join round on, so every later cut labels them
    assert all(set(joiners) <= set(by_round[r].cluster_labels) for r in range(21, 25))
    assert by_round[24].newcomers == []


def test_quarantine_zero_aggregates_joiners():
    cfg = small_config(StrategyConfig("cluster", k=4, quarantine_rounds=0), spec="newcomers", rounds=20)
    join = run(cfg).records[-1]
    assert {9, 10, 11, 12} <= set(join.aggregated)
    assert all(join.rationale[c] == "initialization" for c in (9, 10, 11, 12))


def test_error_names_round_and_phase():
    cfg = small_config(StrategyConfig("random", n=20), rounds=2)
    with pytest.raises(UsageError, match="round 1, phase select"):
        run(cfg)


# -- oracles ---------------------------------------------------------------

def pooled_accuracy(fd, epochs, lr):
    X = np.vstack([d.X for d in fd.clients.values()])
    y = np.concatenate([d.y for d in fd.clients.values()])
    clf = SoftmaxRegression(num_classes=fd.num_classes, learning_rate=lr, epochs=epochs).fit(X, y)
    return clf.score(fd.test.X, fd.test.y)


@pytest.mark.slow
def test_iid_matches_pooled_training():
    spec_text = "num_classes 4\n" + "".join(
        f"{cid} grey 0:60,1:60,2:60,3:60 0\n" for cid in range(1, 9)
    )
    spec = parse_partition_spec(spec_text)
    gen = GeneratorParams(feature_dim=16, group_shift=0.0, class_separation=3.0, noise_sigma=1.5)
    from fedsel.data import generate
    fd = generate(spec, gen)
    pooled = pooled_accuracy(fd, epochs=50, lr=0.01)
    for strategy in (StrategyConfig("random", n=3), StrategyConfig("highest_loss", n=3),
                     StrategyConfig("cluster", k=3)):
        cfg = ExperimentConfig("inline", strategy, generator=gen, sgd=SgdParams(learning_rate=0.01),
                               total_rounds=50)
        acc = run(cfg, dataset=fd, spec=spec).records[-1].test_accuracy
        assert abs(acc - pooled) <= 0.02, (strategy.label, acc, pooled)


@pytest.mark.slow
def test_cluster_run_reaches_pooled_level():
    cfg = ExperimentConfig("table2", StrategyConfig("cluster", k=5), generator=GeneratorParams(feature_dim=32),
                           total_rounds=100)
    sim = Simulation(cfg)
    res = sim.run()
    pooled = pooled_accuracy(sim.data, epochs=20, lr=0.001)
    best = np.maximum.accumulate(res.accuracies)
    assert np.all(np.diff(best) >= 0)
    assert best[-1] >= 0.9 * pooled


def test_per_cluster_loss_shapes():
    res = run(small_config(StrategyConfig("cluster", k=1), rounds=3))
    table = per_cluster_loss(res.records)
    for r in res.records[1:]:
        assert table[r.round] == {0: pytest.approx(np.mean(list(r.train_losses.values())))}
    assert per_cluster_loss([]) == {}
    with pytest.raises(UsageError):
        per_cluster_loss(run(small_config(StrategyConfig("random", n=2), rounds=1)).records)


@pytest.mark.slow
def test_hard_group_has_highest_cluster_loss():
    gen = GeneratorParams(feature_dim=16, group_noise={"green": 3.0})
    cfg = ExperimentConfig("table2", StrategyConfig("cluster", k=5), generator=gen, total_rounds=60)
    res = run(cfg)
    green = {9, 10, 11, 12}
    table = per_cluster_loss(res.records)
    hits = 0
    final = res.records[-20:]
    for r in final:
        worst = max(table[r.round], key=table[r.round].get)
        members = {cid for cid, lab in r.cluster_labels.items() if lab == worst}
        hits += bool(members & green)
    assert hits >= 0.8 * len(final)


# -- timing ----------------------------------------------------------------

def test_time_selection_contract():
    roster = frozen_roster(small_config(StrategyConfig("cluster", k=4)))
    t = time_selection(StrategyConfig("cluster", k=4), roster, 10)
    assert 0 < t.min_s <= t.mean_s <= t.max_s
    assert len(t.selected_ids) == 4
    with pytest.raises(UsageError):
        time_selection(StrategyConfig("random", n=2), roster, 9)
    bare = [dataclasses.replace(c, latest_weights=None) for c in roster]
    with pytest.raises(StateError):
        time_selection(StrategyConfig("cluster", k=2), bare, 10)
