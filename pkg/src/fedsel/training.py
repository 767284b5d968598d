"""Local SGD on a client's data, FedAvg aggregation and global evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mc
from .exceptions import ConfigError, NumericError, ShapeError, UsageError

AGGREGATION_MODES = ("sample_weighted", "uniform")


@dataclass(frozen=True)
class SgdParams:
    learning_rate: float = 0.001
    local_epochs: int = 5
    batch_size: int = 32
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    client_id: int
    weights: np.ndarray
    sample_count: int
    train_loss: float

    def __eq__(self, other):
        if not isinstance(other, LocalUpdate):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.sample_count == other.sample_count
            and self.train_loss == other.train_loss
            and np.array_equal(self.weights, other.weights)
        )


def local_train(global_weights, dataset, params: SgdParams, client_id: int,
                num_classes: int) -> LocalUpdate:
    """Run ``local_epochs`` of mini-batch SGD starting from the global weights.

    The shuffle order of epoch ``e`` is seeded from
    ``(shuffle_seed, client_id, e)``. ``global_weights`` is never modified.
    """
    X, y = dataset.X, dataset.y
    if len(y) == 0:
        raise UsageError(f"client {client_id} has an empty dataset")
    start = mc.unflatten(global_weights, num_classes, X.shape[1])
    seed = params.shuffle_seed

    def rng_for_epoch(epoch):
        return np.random.default_rng([seed, client_id, epoch])

    with np.errstate(over="ignore", invalid="ignore"):
        W, b, loss = mc.sgd_epochs(
            start.weights, start.biases, X, y,
            params.learning_rate, params.local_epochs, params.batch_size, rng_for_epoch,
        )
    if not (np.isfinite(loss) and np.isfinite(W).all() and np.isfinite(b).all()):
        raise NumericError(f"local training diverged on client {client_id}")
    return LocalUpdate(client_id, np.concatenate([W.ravel(), b]), len(y), loss)


def fedavg(updates, mode: str = "sample_weighted") -> np.ndarray:
    """Average client weight vectors.

    Summation always runs in ascending ``client_id`` order so that the result
    does not depend on the order in which updates arrived.
    """
    if not updates:
        raise UsageError("fedavg needs at least one update")
    if mode not in AGGREGATION_MODES:
        raise ConfigError(f"unknown aggregation mode {mode!r}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    length = ordered[0].weights.shape[0]
    for u in ordered:
        if u.weights.shape != (length,):
            raise ShapeError(
                f"update from client {u.client_id} has length {u.weights.shape[0]}, expected {length}"
            )
    if len(ordered) == 1:
        return ordered[0].weights.copy()
    if all(np.array_equal(u.weights, ordered[0].weights) for u in ordered[1:]):
        return ordered[0].weights.copy()
    if mode == "uniform":
        coeffs = [1.0] * len(ordered)
    else:
        coeffs = [float(u.sample_count) for u in ordered]
    acc = np.zeros(length)
    for c, u in zip(coeffs, ordered):
        acc += c * u.weights
    result = acc / sum(coeffs)
    # rounding must never push a component outside the inputs' range
    stacked = np.stack([u.weights for u in ordered])
    np.clip(result, stacked.min(axis=0), stacked.max(axis=0), out=result)
    if not np.isfinite(result).all():
        raise NumericError("aggregated weights are not finite")
    return result


def evaluate(global_weights, test, num_classes: int):
    """Return ``(accuracy, loss)`` of the global model on the test set."""
    if len(test.y) == 0:
        raise UsageError("cannot evaluate on an empty test set")
    m = mc.unflatten(global_weights, num_classes, test.X.shape[1])
    return mc.accuracy(m, test.X, test.y), mc.cross_entropy_loss(m, test.X, test.y)
