import numpy as np
import pytest

from fedsel.data import Dataset, FederatedDataset
from fedsel.selection import ClientState


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_roster(losses=None, weights=None, last_trained=None):
    """ClientStates keyed by the ids of whichever mapping is given."""
    ids = sorted((losses or weights or last_trained or {}).keys())
    roster = []
    for cid in ids:
        roster.append(ClientState(
            client_id=cid,
            latest_train_loss=None if losses is None else losses[cid],
            latest_weights=None if weights is None else np.asarray(weights[cid], dtype=float),
            last_trained_round=None if last_trained is None else last_trained[cid],
        ))
    return roster


def blob_dataset(n_clients=2, per_client=60, dim=4, num_classes=2, seed=0, sep=6.0):
    """Small IID federated dataset of well-separated Gaussian classes."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means *= sep / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n):
        y = np.arange(n) % num_classes
        return Dataset(means[y] + rng.normal(size=(n, dim)), y.astype(np.intp))

    clients = {cid: draw(per_client) for cid in range(1, n_clients + 1)}
    return FederatedDataset(clients, draw(200), num_classes, dim)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
