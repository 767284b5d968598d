"""Non-IID partition specs and the synthetic frozen-backbone feature generator.

A partition spec is a plain-text table, one client per line::

    num_classes 6
    # client_id group class:count[,class:count...] join_round
    1 blue 0:565,1:659 0

Features for a class-``c`` sample of a client in group ``g`` are drawn from
``N(mu_c + delta_g, sigma^2 I)``. Class means sit on well-spread random
directions; group offsets are orthogonal to the class-mean differences, so
the group acts as a nuisance covariate rather than a label signal.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, IngestionError

HELDOUT_GROUP = "__heldout__"
SHIPPED_SPECS = ("table1", "table2", "newcomers")


@dataclass(frozen=True)
class ClientSpec:
    client_id: int
    group: str
    class_counts: dict
    join_round: int = 0

    @property
    def num_samples(self) -> int:
        return sum(self.class_counts.values())


@dataclass(frozen=True)
class PartitionSpec:
    clients: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        seen = set()
        for c in self.clients:
            if c.client_id in seen:
                raise ConfigError(f"duplicate client id {c.client_id}")
            seen.add(c.client_id)
            bad = [k for k in c.class_counts if not 0 <= k < self.num_classes]
            if bad:
                raise ConfigError(f"client {c.client_id} references unknown class {bad[0]}")
            if not any(v > 0 for v in c.class_counts.values()):
                raise ConfigError(f"client {c.client_id} has no samples")
            if c.join_round < 0:
                raise ConfigError(f"client {c.client_id} has negative join_round")

    def client(self, client_id: int) -> ClientSpec:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)

    @property
    def client_ids(self) -> list:
        return [c.client_id for c in self.clients]

    def class_totals(self) -> dict:
        totals = {k: 0 for k in range(self.num_classes)}
        for c in self.clients:
            for k, v in c.class_counts.items():
                totals[k] += v
        return totals

    def subset(self, client_ids) -> "PartitionSpec":
        keep = set(client_ids)
        return PartitionSpec([c for c in self.clients if c.client_id in keep], self.num_classes)


@dataclass(frozen=True)
class GeneratorParams:
    feature_dim: int = 64
    class_separation: float = 4.0
    group_shift: float = 1.0
    noise_sigma: float = 1.0
    seed: int = 0
    # per-group noise override, e.g. to make one group harder to fit
    group_noise: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.class_separation <= 0 or self.noise_sigma <= 0:
            raise ConfigError("class_separation and noise_sigma must be positive")
        if self.group_shift < 0:
            raise ConfigError("group_shift must be non-negative")
        if any(v <= 0 for v in self.group_noise.values()):
            raise ConfigError("group_noise entries must be positive")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.y.shape[0]


@dataclass
class FederatedDataset:
    clients: dict
    test: Dataset
    num_classes: int
    feature_dim: int


# -- spec files --------------------------------------------------------------

def parse_partition_spec(text: str, source: str = "<string>") -> PartitionSpec:
    num_classes = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "num_classes":
                if len(parts) != 2:
                    raise ValueError("expected 'num_classes <int>'")
                num_classes = int(parts[1])
                continue
            if len(parts) != 4:
                raise ValueError("expected 'client_id group class:count[,...] join_round'")
            counts = {}
            for item in parts[2].split(","):
                k, v = item.split(":")
                k, v = int(k), int(v)
                if k in counts:
                    raise ValueError(f"class {k} listed twice")
                if v < 0:
                    raise ValueError(f"negative count for class {k}")
                counts[k] = v
            rows.append((lineno, ClientSpec(int(parts[0]), parts[1], counts, int(parts[3]))))
        except ValueError as exc:
            raise ConfigError(f"{source}, line {lineno}: {exc}") from None
    if not rows:
        raise ConfigError(f"{source}: no client rows")
    if num_classes is None:
        num_classes = max(max(c.class_counts) for _, c in rows) + 1
    if num_classes < 2:
        raise ConfigError(f"{source}: num_classes must be >= 2")
    seen = {}
    for lineno, c in rows:
        if c.client_id in seen:
            raise ConfigError(f"{source}, line {lineno}: duplicate client id {c.client_id}")
        seen[c.client_id] = lineno
        unknown = [k for k in c.class_counts if k >= num_classes]
        if unknown:
            raise ConfigError(f"{source}, line {lineno}: unknown class {unknown[0]}")
    try:
        return PartitionSpec([c for _, c in rows], num_classes)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def shipped_spec_text(name: str) -> str:
    if name not in SHIPPED_SPECS:
        raise ConfigError(f"no shipped spec named {name!r}; choose from {SHIPPED_SPECS}")
    return resources.files("fedsel.specs").joinpath(f"{name}.spec").read_text(encoding="utf-8")


def load_partition_spec(path) -> PartitionSpec:
    """Load a spec file; a bare shipped name such as ``"table2"`` also works."""
    p = Path(path)
    if not p.exists() and str(path) in SHIPPED_SPECS:
        return parse_partition_spec(shipped_spec_text(str(path)), source=str(path))
    return parse_partition_spec(p.read_text(encoding="utf-8"), source=str(p))


def format_partition_spec(spec: PartitionSpec) -> str:
    lines = [f"num_classes {spec.num_classes}"]
    for c in spec.clients:
        counts = ",".join(f"{k}:{v}" for k, v in sorted(c.class_counts.items()))
        lines.append(f"{c.client_id} {c.group} {counts} {c.join_round}")
    return "\n".join(lines) + "\n"


# -- geometry ----------------------------------------------------------------

def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def class_means(num_classes: int, params: GeneratorParams, max_tries: int = 10_000) -> np.ndarray:
    """Class centres at ``class_separation`` times random unit vectors.

    Directions are drawn one at a time and rejected until their dot product
    with every accepted direction is below 0.5.
    """
    if params.feature_dim < num_classes:
        raise ConfigError(
            f"feature_dim={params.feature_dim} too small to separate {num_classes} classes"
        )
    rng = np.random.default_rng([params.seed, 0])
    dirs = []
    tries = 0
    while len(dirs) < num_classes:
        tries += 1
        if tries > max_tries:
            raise ConfigError("could not place well-separated class means")
        u = rng.standard_normal(params.feature_dim)
        u /= np.linalg.norm(u)
        if all(float(u @ v) < 0.5 for v in dirs):
            dirs.append(u)
    return params.class_separation * np.array(dirs)


def group_offset(group: str, means: np.ndarray, params: GeneratorParams) -> np.ndarray:
    d = params.feature_dim
    if params.group_shift == 0:
        return np.zeros(d)
    rng = np.random.default_rng([params.seed, 3, _name_key(group)])
    v = rng.standard_normal(d)
    diffs = (means[1:] - means[0]).T
    if diffs.shape[1] and d > diffs.shape[1]:
        q, _ = np.linalg.qr(diffs)
        projected = v - q @ (q.T @ v)
        if np.linalg.norm(projected) > 1e-8:
            v = projected
    return params.group_shift * v / np.linalg.norm(v)


def _draw(rng, mean, sigma, count):
    return mean + sigma * rng.standard_normal((count, mean.shape[0]))


def _client_dataset(client: ClientSpec, means, params) -> Dataset:
    rng = np.random.default_rng([params.seed, 1, client.client_id])
    delta = group_offset(client.group, means, params)
    sigma = params.group_noise.get(client.group, params.noise_sigma)
    Xs, ys = [], []
    for k in sorted(client.class_counts):
        count = client.class_counts[k]
        Xs.append(_draw(rng, means[k] + delta, sigma, count))
        ys.append(np.full(count, k, dtype=np.intp))
    return Dataset(np.vstack(Xs), np.concatenate(ys))


def build_test_set(
    spec: PartitionSpec,
    params: GeneratorParams,
    excluded_client_ids=(),
    per_class_count: int = 200,
    seed: int | None = None,
) -> Dataset:
    """Class-balanced test set.

    Classes held by the excluded clients are sampled from those clients'
    distributions in turn; every other class uses the held-out group offset.
    """
    if per_class_count < 1:
        raise ConfigError("per_class_count must be >= 1")
    seed = params.seed if seed is None else seed
    means = class_means(spec.num_classes, params)
    excluded = [spec.client(cid) for cid in sorted(excluded_client_ids)]
    heldout = group_offset(HELDOUT_GROUP, means, params)
    Xs, ys = [], []
    for k in range(spec.num_classes):
        rng = np.random.default_rng([seed, 2, k])
        owners = [c for c in excluded if c.class_counts.get(k, 0) > 0]
        if owners:
            shares = [per_class_count // len(owners)] * len(owners)
            for i in range(per_class_count % len(owners)):
                shares[i] += 1
            for owner, share in zip(owners, shares):
                delta = group_offset(owner.group, means, params)
                sigma = params.group_noise.get(owner.group, params.noise_sigma)
                Xs.append(_draw(rng, means[k] + delta, sigma, share))
        else:
            Xs.append(_draw(rng, means[k] + heldout, params.noise_sigma, per_class_count))
        ys.append(np.full(per_class_count, k, dtype=np.intp))
    return Dataset(np.vstack(Xs), np.concatenate(ys))


def generate(
    spec: PartitionSpec,
    params: GeneratorParams,
    excluded_client_ids=(),
    per_class_count: int = 200,
) -> FederatedDataset:
    """Generate every training client plus the shared test set.

    Clients listed in ``excluded_client_ids`` get no training data; they only
    shape the test distribution.
    """
    means = class_means(spec.num_classes, params)
    excluded = set(excluded_client_ids)
    unknown = excluded - set(spec.client_ids)
    if unknown:
        raise ConfigError(f"excluded clients not in spec: {sorted(unknown)}")
    clients = {
        c.client_id: _client_dataset(c, means, params)
        for c in spec.clients
        if c.client_id not in excluded
    }
    test = build_test_set(spec, params, sorted(excluded), per_class_count)
    return FederatedDataset(clients, test, spec.num_classes, params.feature_dim)


# -- embeddings CSV ----------------------------------------------------------

def ingest_embeddings(path) -> dict:
    """Read ``client_id,label,f0..f{d-1}`` rows into per-client datasets."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        d = len(header) - 2
        expected = ["client_id", "label"] + [f"f{i}" for i in range(d)]
        if d < 1 or [h.strip() for h in header] != expected:
            raise IngestionError(f"{path}: row 1: unrecognised header {header!r}")
        rows = {}
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise IngestionError(
                    f"{path}: row {rowno}: expected {d + 2} fields, got {len(row)}"
                )
            try:
                cid, label = int(row[0]), int(row[1])
                feats = [float(v) for v in row[2:]]
            except ValueError:
                raise IngestionError(f"{path}: row {rowno}: non-numeric value") from None
            if not np.isfinite(feats).all():
                raise IngestionError(f"{path}: row {rowno}: non-finite feature")
            rows.setdefault(cid, ([], []))
            rows[cid][0].append(feats)
            rows[cid][1].append(label)
    return {
        cid: Dataset(np.array(feats, dtype=np.float64).reshape(-1, d), np.array(labels, dtype=np.intp))
        for cid, (feats, labels) in sorted(rows.items())
    }


def export_embeddings(clients: dict, path) -> None:
    path = Path(path)
    d = next(iter(clients.values())).X.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["client_id", "label"] + [f"f{i}" for i in range(d)])
        for cid in sorted(clients):
            ds = clients[cid]
            for x, label in zip(ds.X, ds.y):
                writer.writerow([cid, int(label)] + [repr(float(v)) for v in x])


def class_histogram(data, num_classes: int | None = None) -> dict:
    """Map class -> (count, percent), percent rounded half-up to 2 decimals.

    ``data`` may be a :class:`PartitionSpec`, a :class:`Dataset`, or a
    sequence of labels.
    """
    if isinstance(data, PartitionSpec):
        counts = data.class_totals()
        num_classes = data.num_classes
    else:
        labels = np.asarray(data.y if isinstance(data, Dataset) else list(data), dtype=np.intp)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        counts = {k: int(np.sum(labels == k)) for k in range(num_classes)}
    total = sum(counts.values())
    out = {}
    for k in range(num_classes):
        if total:
            pct = (Decimal(counts[k]) * 100 / Decimal(total)).quantize(
                Decimal("0.01"), rounding=ROUND_HALF_UP
            )
        else:
            pct = Decimal("0.00")
        out[k] = (counts[k], float(pct))
    return out
