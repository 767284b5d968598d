"""Client-selection strategies and newcomer tracking.

Three strategies share one entry point, :func:`select`:

* ``random``       -- uniform sample of ``n`` or ``ceil(fraction * roster)`` clients
* ``highest_loss`` -- the ``n`` clients with the largest cached training loss
* ``cluster``      -- one representative per agglomerative cluster of the
  clients' cached weight vectors
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import LINKAGES, METRICS, agglomerative, cut_k, pairwise_distances
from .exceptions import ConfigError, StateError, UsageError

KINDS = ("random", "highest_loss", "cluster")
POLICIES = ("least_recent", "uniform_random")


@dataclass
class ClientState:
    client_id: int
    dataset: object = None
    joined_round: int = 0
    latest_weights: np.ndarray | None = None
    latest_train_loss: float | None = None
    participation_count: int = 0
    last_trained_round: int | None = None
    newcomer: bool = False
    stable_cluster_streak: int = 0
    last_cluster: int | None = None

    @property
    def has_weights(self) -> bool:
        return self.latest_weights is not None


@dataclass(frozen=True)
class ClusterAssignment:
    """``labels`` maps client id -> cluster id in ``[0, k)``."""

    labels: dict
    k: int

    def members(self, cluster_id: int) -> list:
        return sorted(cid for cid, c in self.labels.items() if c == cluster_id)


@dataclass
class SelectionDecision:
    selected_ids: list
    rationale: dict = field(default_factory=dict)
    cluster_assignment: ClusterAssignment | None = None

    def __post_init__(self):
        if len(set(self.selected_ids)) != len(self.selected_ids):
            raise StateError(f"duplicate ids in selection {self.selected_ids}")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    fraction: float | None = None
    n: int | None = None
    k: int | None = None
    metric: str = "cosine"
    linkage: str = "complete"
    within_cluster_policy: str = "least_recent"
    quarantine_rounds: int = 1
    stability_window: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "random":
            if (self.fraction is None) == (self.n is None) or self.k is not None:
                raise ConfigError("random strategy takes exactly one of fraction or n")
        elif self.kind == "highest_loss":
            if self.n is None or self.fraction is not None or self.k is not None:
                raise ConfigError("highest_loss strategy takes n only")
        elif self.k is None or self.fraction is not None or self.n is not None:
            raise ConfigError("cluster strategy takes k only")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ConfigError("fraction must lie in (0, 1]")
        if self.n is not None and self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.linkage not in LINKAGES:
            raise ConfigError(f"unknown linkage {self.linkage!r}")
        if self.within_cluster_policy not in POLICIES:
            raise ConfigError(f"unknown within-cluster policy {self.within_cluster_policy!r}")
        if self.quarantine_rounds < 0 or self.stability_window < 1:
            raise ConfigError("quarantine_rounds >= 0 and stability_window >= 1 required")

    @property
    def label(self) -> str:
        if self.kind == "cluster":
            return f"cluster(k={self.k})"
        if self.fraction is not None:
            return f"random(fraction={self.fraction:g})"
        return f"{self.kind}(n={self.n})"


def _sorted(roster):
    return sorted(roster, key=lambda c: c.client_id)


def sample_size(roster_size: int, fraction: float) -> int:
    # round() strips float noise such as 0.1 * 30 == 3.0000000000000004 before ceil
    return math.ceil(round(fraction * roster_size, 9))


def select_random(roster, rng, fraction=None, n=None) -> SelectionDecision:
    roster = _sorted(roster)
    if not roster:
        raise UsageError("cannot select from an empty roster")
    if (fraction is None) == (n is None):
        raise UsageError("pass exactly one of fraction or n")
    count = sample_size(len(roster), fraction) if fraction is not None else n
    if count > len(roster):
        raise UsageError(f"cannot select {count} of {len(roster)} clients")
    ids = np.array([c.client_id for c in roster])
    chosen = sorted(int(i) for i in rng.choice(ids, size=count, replace=False))
    return SelectionDecision(chosen, {cid: "random" for cid in chosen})


def select_highest_loss(roster, n: int) -> SelectionDecision:
    roster = _sorted(roster)
    if n > len(roster):
        raise UsageError(f"cannot select {n} of {len(roster)} clients")
    for c in roster:
        if c.latest_train_loss is None:
            raise StateError(f"client {c.client_id} has no training loss yet")
    ranked = sorted(roster, key=lambda c: (-c.latest_train_loss, c.client_id))
    chosen = [c.client_id for c in ranked[:n]]
    return SelectionDecision(chosen, {cid: "top_loss" for cid in chosen})


def cluster_clients(roster, k: int, metric="cosine", linkage="complete") -> ClusterAssignment:
    """Cluster the clients that have cached weights.

    ``k`` is capped at the number of clusterable clients.
    """
    clusterable = [c for c in _sorted(roster) if c.has_weights]
    if not clusterable:
        raise StateError("no client has weights to cluster")
    k = min(k, len(clusterable))
    if len(clusterable) == 1:
        return ClusterAssignment({clusterable[0].client_id: 0}, 1)
    X = np.stack([c.latest_weights for c in clusterable])
    # cached weights are finite by construction, so skip the estimator's input validation
    labels = cut_k(agglomerative(pairwise_distances(X, metric), linkage), k)
    return ClusterAssignment({c.client_id: int(l) for c, l in zip(clusterable, labels)}, k)


def select_by_cluster(roster, assignment: ClusterAssignment, policy="least_recent",
                      rng=None) -> SelectionDecision:
    by_id = {c.client_id: c for c in roster}
    missing = set(assignment.labels) - set(by_id)
    if missing:
        raise StateError(f"assignment names clients outside the roster: {sorted(missing)}")
    chosen = []
    for cluster_id in range(assignment.k):
        members = assignment.members(cluster_id)
        if not members:
            raise StateError(f"cluster {cluster_id} is empty")
        if policy == "least_recent":
            def recency(cid):
                last = by_id[cid].last_trained_round
                return (-1 if last is None else last, cid)
            pick = min(members, key=recency)
        elif policy == "uniform_random":
            if rng is None:
                raise UsageError("uniform_random policy needs an rng")
            pick = int(rng.choice(members))
        else:
            raise ConfigError(f"unknown within-cluster policy {policy!r}")
        chosen.append(pick)
    return SelectionDecision(
        chosen, {cid: "cluster_representative" for cid in chosen}, assignment
    )


def initialization_schedule(roster) -> list:
    """A single bootstrap round in which every founding client trains once."""
    ids = [c.client_id for c in _sorted(roster)]
    return [SelectionDecision(ids, {cid: "initialization" for cid in ids})]


def update_cluster_streaks(roster, assignment: ClusterAssignment) -> None:
    for c in roster:
        label = assignment.labels.get(c.client_id)
        if label is None:
            continue
        if c.last_cluster == label:
            c.stable_cluster_streak += 1
        else:
            c.stable_cluster_streak = 1
        c.last_cluster = label


def detect_newcomers(roster, current_round: int, stability_window: int = 3) -> list:
    """Flag late joiners until their cluster label has been stable long enough.

    Founding clients (``joined_round == 0``) are never flagged. Also refreshes
    each client's ``newcomer`` attribute.
    """
    flagged = []
    for c in _sorted(roster):
        is_new = c.joined_round > 0 and c.joined_round <= current_round and (
            not c.has_weights or c.stable_cluster_streak < stability_window
        )
        c.newcomer = is_new
        if is_new:
            flagged.append(c.client_id)
    return flagged


def quarantine_filter(updates, newcomer_ids, quarantine_rounds: int, rounds_since_join) -> list:
    """Drop updates of newcomers that joined fewer than ``quarantine_rounds`` rounds ago."""
    if quarantine_rounds == 0:
        return list(updates)
    newcomers = set(newcomer_ids)
    return [
        u for u in updates
        if not (u.client_id in newcomers and rounds_since_join[u.client_id] < quarantine_rounds)
    ]


def select(config: StrategyConfig, roster, rng) -> SelectionDecision:
    """Run one selection step for ``config`` over the active roster.

    Clients without a cached loss (or weights) are invisible to the
    loss-based and cluster strategies respectively.
    """
    if config.kind == "random":
        return select_random(roster, rng, fraction=config.fraction, n=config.n)
    if config.kind == "highest_loss":
        eligible = [c for c in roster if c.latest_train_loss is not None]
        return select_highest_loss(eligible, min(config.n, len(eligible)))
    assignment = cluster_clients(roster, config.k, config.metric, config.linkage)
    return select_by_cluster(roster, assignment, config.within_cluster_policy, rng)
