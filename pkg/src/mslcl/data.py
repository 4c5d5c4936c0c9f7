"""Multi-domain labeled data, task streams and rehearsal memory.

Domain ids live here and in evaluation only. Training code receives
:class:`Batch` objects whose ``features`` and ``labels`` are all the model
sees; ``index`` points back into the training arrays for auditing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Optional

import numpy as np
from scipy.linalg import expm

from .autodiff import ConfigError


class DataError(ValueError):
    """Malformed or invalid dataset content."""


class Sample(NamedTuple):
    features: np.ndarray
    label: int
    domain_id: int


@dataclass
class DomainDataset:
    """Train/test arrays tagged with class labels and domain ids.

    After :func:`leave_one_domain_out`, training domains are numbered
    ``0..m-1`` and the held-out domain is ``m == unseen_domain``; it has no
    training rows.
    """

    X_train: np.ndarray
    y_train: np.ndarray
    domain_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    domain_test: np.ndarray
    num_classes: int
    num_domains: int
    unseen_domain: Optional[int] = None
    source_domains: tuple = ()

    def __post_init__(self):
        if not self.source_domains:
            self.source_domains = tuple(range(self.num_domains))

    @property
    def d(self) -> int:
        return self.X_train.shape[1]

    @property
    def train_domains(self) -> list:
        return sorted(int(k) for k in np.unique(self.domain_train))

    def samples(self, split: str = "train") -> Iterator[Sample]:
        X, y, dom = self._split(split)
        for i in range(len(y)):
            yield Sample(X[i], int(y[i]), int(dom[i]))

    def _split(self, split):
        if split == "train":
            return self.X_train, self.y_train, self.domain_train
        if split == "test":
            return self.X_test, self.y_test, self.domain_test
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")

    def train_indices(self, classes, domain: Optional[int] = None) -> np.ndarray:
        mask = np.isin(self.y_train, list(classes))
        if domain is not None:
            mask &= self.domain_train == domain
        return np.flatnonzero(mask)

    def test_indices(self, classes, domain: Optional[int] = None) -> np.ndarray:
        mask = np.isin(self.y_test, list(classes))
        if domain is not None:
            mask &= self.domain_test == domain
        return np.flatnonzero(mask)

    def validate(self) -> None:
        for name in ("X_train", "X_test"):
            X = getattr(self, name)
            if X.size and not np.all(np.isfinite(X)):
                raise DataError(f"{name} contains non-finite values")
        if (self.y_train < 0).any() or (self.y_test < 0).any():
            raise DataError("labels must be nonnegative")
        if self.unseen_domain is not None and (self.domain_train == self.unseen_domain).any():
            raise DataError("the unseen domain has training samples")
        missing = [
            (c, k)
            for k in self.train_domains
            for c in range(self.num_classes)
            if not np.any((self.y_train == c) & (self.domain_train == k))
        ]
        if missing:
            cells = ", ".join(f"(class {c}, domain {k})" for c, k in missing)
            raise DataError(f"empty training cells: {cells}")

    def relabel(self, order) -> "DomainDataset":
        """Rename class ``order[i]`` to ``i``."""
        mapping = np.full(self.num_classes, -1, dtype=np.int64)
        mapping[np.asarray(order, dtype=np.int64)] = np.arange(len(order))
        return DomainDataset(
            self.X_train, mapping[self.y_train], self.domain_train,
            self.X_test, mapping[self.y_test], self.domain_test,
            self.num_classes, self.num_domains, self.unseen_domain, self.source_domains,
        )


def datasets_equal(a: DomainDataset, b: DomainDataset) -> bool:
    arrays = ("X_train", "y_train", "domain_train", "X_test", "y_test", "domain_test")
    return (
        all(np.array_equal(getattr(a, k), getattr(b, k)) for k in arrays)
        and a.num_classes == b.num_classes
        and a.num_domains == b.num_domains
        and a.unseen_domain == b.unseen_domain
    )


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    m_domains: int = 4
    d: int = 20
    per_cell_count: int = 50
    shift_strength: float = 0.5
    noise_sigma: float = 0.3
    seed: int = 0
    radius: float = 3.0
    train_fraction: float = 0.8

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.m_domains < 2:
            raise ConfigError(f"m_domains must be >= 2, got {self.m_domains}")
        if self.d < 2:
            raise ConfigError(f"d must be >= 2, got {self.d}")
        if self.per_cell_count < 2:
            raise ConfigError(f"per_cell_count must be >= 2, got {self.per_cell_count}")
        if not 0.0 <= self.shift_strength < 1.0:
            raise ConfigError(f"shift_strength must lie in [0, 1), got {self.shift_strength}")
        if self.noise_sigma < 0 or self.radius <= 0:
            raise ConfigError("noise_sigma must be >= 0 and radius > 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


def _random_rotation(rng, d: int, strength: float) -> np.ndarray:
    # expm of a skew-symmetric matrix with spectral norm strength * pi / 2.
    A = rng.standard_normal((d, d))
    S = A - A.T
    norm = np.linalg.norm(S, 2)
    if strength == 0 or norm == 0:
        return np.eye(d)
    return expm(S * (strength * math.pi / 2 / norm))


def generate_synthetic(config: SyntheticConfig) -> DomainDataset:
    """Class prototypes pushed through a per-domain affine map plus noise.

    Domain k sends prototype mu_c to R_k (s_k * mu_c) + t_k, where R_k is a
    rotation whose angle grows with ``shift_strength``, s_k is a per-axis
    scale in [1 - s, 1 + s] and ||t_k|| = s * radius. Every (class, domain)
    cell is split train/test; no domain is held out yet.
    """
    config.validate()
    C, m, d, s = config.num_classes, config.m_domains, config.d, config.shift_strength
    rng = np.random.default_rng([config.seed, 0])
    mu = rng.standard_normal((C, d))
    mu *= config.radius / np.linalg.norm(mu, axis=1, keepdims=True)

    n_train = max(1, min(config.per_cell_count - 1, int(round(config.train_fraction * config.per_cell_count))))
    parts = {"train": ([], [], []), "test": ([], [], [])}
    for k in range(m):
        drng = np.random.default_rng([config.seed, 1, k])
        R = _random_rotation(drng, d, s)
        scale = drng.uniform(1.0 - s, 1.0 + s, size=d)
        direction = drng.standard_normal(d)
        t = direction / np.linalg.norm(direction) * s * config.radius
        for c in range(C):
            crng = np.random.default_rng([config.seed, 2, k, c])
            centre = R @ (scale * mu[c]) + t
            X = centre + config.noise_sigma * crng.standard_normal((config.per_cell_count, d))
            for split, rows in (("train", X[:n_train]), ("test", X[n_train:])):
                Xs, ys, ds = parts[split]
                Xs.append(rows)
                ys.append(np.full(len(rows), c, dtype=np.int64))
                ds.append(np.full(len(rows), k, dtype=np.int64))

    def cat(split):
        Xs, ys, ds = parts[split]
        return np.concatenate(Xs), np.concatenate(ys), np.concatenate(ds)

    ds = DomainDataset(*cat("train"), *cat("test"), num_classes=C, num_domains=m)
    ds.validate()
    return ds


def leave_one_domain_out(dataset: DomainDataset, held_out: int) -> DomainDataset:
    """Hold out one domain: all its samples become test data under id ``m``.

    The remaining domains are renumbered ``0..m-1`` in their original order;
    ``source_domains`` records the original id of every new index.
    """
    if dataset.unseen_domain is not None:
        raise DataError("dataset already has a held-out domain")
    if not 0 <= held_out < dataset.num_domains:
        raise ConfigError(f"held-out domain {held_out} outside [0, {dataset.num_domains})")
    seen = [k for k in range(dataset.num_domains) if k != held_out]
    remap = np.empty(dataset.num_domains, dtype=np.int64)
    remap[seen] = np.arange(len(seen))
    m = len(seen)
    remap[held_out] = m

    keep = dataset.domain_train != held_out
    moved = ~keep
    X_test = np.concatenate([dataset.X_test, dataset.X_train[moved]])
    y_test = np.concatenate([dataset.y_test, dataset.y_train[moved]])
    dom_test = remap[np.concatenate([dataset.domain_test, dataset.domain_train[moved]])]
    out = DomainDataset(
        dataset.X_train[keep], dataset.y_train[keep], remap[dataset.domain_train[keep]],
        X_test, y_test, dom_test,
        num_classes=dataset.num_classes,
        num_domains=dataset.num_domains,
        unseen_domain=m,
        source_domains=tuple(dataset.source_domains[k] for k in seen) + (dataset.source_domains[held_out],),
    )
    out.validate()
    return out


REQUIRED_COLUMNS = ("label", "domain", "split")


def load_features_table(path) -> DomainDataset:
    """Read a comma-separated feature table with a header row.

    Every column except ``label``, ``domain`` and ``split`` is a feature.
    ``split`` must be ``train`` or ``test``. Labels and domains are
    nonnegative integers.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open feature table {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, a header row is required") from None
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: header lacks columns {missing}")
        pos = {c: header.index(c) for c in REQUIRED_COLUMNS}
        feat_cols = [i for i, h in enumerate(header) if h not in REQUIRED_COLUMNS]
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        rows = {"train": ([], [], []), "test": ([], [], [])}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats = [float(row[i]) for i in feat_cols]
                label = int(row[pos["label"]])
                domain = int(row[pos["domain"]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            split = row[pos["split"]].strip()
            if split not in rows:
                raise DataError(f"{path}:{lineno}: split must be 'train' or 'test', got {split!r}")
            if not all(math.isfinite(v) for v in feats):
                raise DataError(f"{path}:{lineno}: non-finite feature value")
            if label < 0 or domain < 0:
                raise DataError(f"{path}:{lineno}: label and domain must be nonnegative")
            X, y, dom = rows[split]
            X.append(feats)
            y.append(label)
            dom.append(domain)

    d = len(feat_cols)

    def arrays(split):
        X, y, dom = rows[split]
        return (
            np.array(X, dtype=np.float64).reshape(len(X), d),
            np.array(y, dtype=np.int64),
            np.array(dom, dtype=np.int64),
        )

    train, test = arrays("train"), arrays("test")
    if len(train[1]) == 0:
        raise DataError(f"{path}: no training rows")
    labels = np.concatenate([train[1], test[1]])
    domains = np.concatenate([train[2], test[2]])
    ds = DomainDataset(*train, *test, num_classes=int(labels.max()) + 1, num_domains=int(domains.max()) + 1)
    ds.validate()
    return ds


def write_features_table(dataset: DomainDataset, path) -> None:
    """Write ``dataset`` in the format read by :func:`load_features_table`.

    Floats are written with ``repr`` so that reading back is exact.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.d)] + list(REQUIRED_COLUMNS))
        for split in ("train", "test"):
            X, y, dom = dataset._split(split)
            for i in range(len(y)):
                w.writerow([repr(float(v)) for v in X[i]] + [int(y[i]), int(dom[i]), split])


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple

    @property
    def q(self) -> int:
        return len(self.tasks)

    @property
    def class_order(self) -> list:
        return [c for t in self.tasks for c in t]


def split_tasks(dataset: DomainDataset, q: int, seed) -> TaskStream:
    """Shuffle class ids and cut them into ``q`` contiguous groups."""
    C = dataset.num_classes
    if not 1 <= q <= C:
        raise ConfigError(f"cannot split {C} classes into {q} tasks")
    order = np.random.default_rng(seed).permutation(C)
    return TaskStream(tuple(tuple(int(c) for c in g) for g in np.array_split(order, q)))


MEMORY_MODES = ("per_domain", "class_balanced")


@dataclass
class RehearsalMemory:
    """Exemplar indices into the training arrays, keyed by cell.

    In ``per_domain`` mode a cell is a (class, domain) pair holding up to
    ``capacity`` exemplars. In ``class_balanced`` mode a cell is a class
    and holds up to ``capacity`` times the number of training domains,
    drawn without looking at domain ids.
    """

    capacity: int = 5
    seed: int = 0
    mode: str = "per_domain"
    cells: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 0:
            raise ConfigError(f"memory capacity must be >= 0, got {self.capacity}")
        if self.mode not in MEMORY_MODES:
            raise ConfigError(f"memory mode must be one of {MEMORY_MODES}, got {self.mode!r}")

    def indices(self) -> np.ndarray:
        if not self.cells:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([self.cells[k] for k in sorted(self.cells)]).astype(np.int64)

    def __len__(self) -> int:
        return sum(len(v) for v in self.cells.values())


def memory_update(memory: RehearsalMemory, dataset: DomainDataset, classes, seed=None) -> RehearsalMemory:
    """Store random exemplars of ``classes``; cells already present are kept.

    Each cell draws from its own generator keyed by (seed, class[, domain]),
    so the chosen exemplars do not depend on training history.
    """
    seed = memory.seed if seed is None else seed
    if memory.capacity == 0:
        return memory
    for c in classes:
        c = int(c)
        if memory.mode == "per_domain":
            for k in dataset.train_domains:
                key = (c, k)
                if key in memory.cells:
                    continue
                pool = dataset.train_indices([c], k)
                take = min(memory.capacity, len(pool))
                rng = np.random.default_rng([seed, c, k])
                memory.cells[key] = np.sort(rng.choice(pool, size=take, replace=False))
        else:
            key = (c, -1)
            if key in memory.cells:
                continue
            pool = dataset.train_indices([c])
            take = min(memory.capacity * len(dataset.train_domains), len(pool))
            rng = np.random.default_rng([seed, c])
            memory.cells[key] = np.sort(rng.choice(pool, size=take, replace=False))
    return memory


class Batch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    index: np.ndarray


def batches(dataset: DomainDataset, current: np.ndarray, memory: Optional[RehearsalMemory],
            batch_size: int, seed, epoch: int = 0) -> Iterator[Batch]:
    """One shuffled pass over current-task rows plus every memory exemplar."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    mem = memory.indices() if memory is not None else np.empty(0, dtype=np.int64)
    pool = np.concatenate([np.asarray(current, dtype=np.int64), mem])
    if pool.size == 0:
        raise DataError("no samples to draw batches from")
    order = pool[np.random.default_rng([*np.atleast_1d(seed).tolist(), epoch]).permutation(pool.size)]
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(dataset.X_train[idx], dataset.y_train[idx], idx)


class StreamRecorder:
    """Records every training batch and memory state for later auditing."""

    def __init__(self):
        self.batch_indices: list = []
        self.memory_indices: list = []

    def on_batch(self, batch: Batch) -> None:
        self.batch_indices.append(np.array(batch.index))

    def on_memory(self, memory: RehearsalMemory) -> None:
        self.memory_indices.append(memory.indices())

    def domains_seen(self, dataset: DomainDataset) -> set:
        idx = [i for i in self.batch_indices + self.memory_indices if i.size]
        if not idx:
            return set()
        return set(np.unique(dataset.domain_train[np.concatenate(idx)]).tolist())

    def rows_seen(self, dataset: DomainDataset) -> np.ndarray:
        idx = [i for i in self.batch_indices + self.memory_indices if i.size]
        return dataset.X_train[np.unique(np.concatenate(idx))] if idx else np.empty((0, dataset.d))
