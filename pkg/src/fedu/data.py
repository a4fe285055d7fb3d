"""Datasets, federated partitioning and CIFAR-10 binary ingestion."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from fedu.errors import ConfigurationError, ParseError

log = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32
CIFAR_CHANNELS = 3


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            features = features.reshape(len(labels), -1)
        if features.shape[0] != labels.shape[0]:
            raise ConfigurationError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class Partition:
    """Disjoint client index lists covering a dataset."""

    assignments: dict[int, np.ndarray]

    def __getitem__(self, client_id: int) -> np.ndarray:
        return self.assignments[client_id]

    def __len__(self) -> int:
        return len(self.assignments)

    def clients(self) -> list[int]:
        return sorted(self.assignments)

    def validate(self, n: int) -> None:
        seen = np.zeros(n, dtype=np.int64)
        for cid, idx in self.assignments.items():
            if len(idx) == 0:
                raise ConfigurationError(f"client {cid} received no samples")
            np.add.at(seen, idx, 1)
        if (seen > 1).any():
            raise ConfigurationError("partition index lists overlap")
        if (seen == 0).any():
            raise ConfigurationError("partition does not cover the dataset")


def partition_iid(ds: Dataset, num_clients: int, rng: np.random.Generator) -> Partition:
    """Every client gets an (almost) equal share of every class."""
    if num_clients < 1:
        raise ConfigurationError("number of clients must be >= 1", field="num_clients")
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < num_clients:
            raise ConfigurationError(
                f"class {c} has {len(idx)} samples, fewer than {num_clients} clients"
            )
        idx = rng.permutation(idx)
        for k, chunk in enumerate(np.array_split(idx, num_clients)):
            parts[k].append(chunk)
    return Partition({k: np.sort(np.concatenate(p)) for k, p in enumerate(parts)})


def partition_noniid(ds: Dataset, num_clients: int, rng: np.random.Generator) -> Partition:
    """Label skew: each client owns all samples of its own C/K classes."""
    c, k = ds.num_classes, num_clients
    if k < 1:
        raise ConfigurationError("number of clients must be >= 1", field="num_clients")
    if c % k:
        raise ConfigurationError(
            f"non-IID split needs the class count ({c}) to be divisible by the number of clients ({k})",
            field="num_clients",
        )
    classes = rng.permutation(c)
    per = c // k
    out = {}
    for client in range(k):
        group = classes[client * per : (client + 1) * per]
        out[client] = np.flatnonzero(np.isin(ds.labels, group))
        if len(out[client]) == 0:
            raise ConfigurationError(f"client {client} classes {sorted(group.tolist())} have no samples")
    return Partition(out)


def make_partition(ds: Dataset, scheme: str, num_clients: int, rng: np.random.Generator) -> Partition:
    if scheme == "iid":
        return partition_iid(ds, num_clients, rng)
    if scheme == "noniid":
        return partition_noniid(ds, num_clients, rng)
    raise ConfigurationError(f"unknown partition scheme {scheme!r}", field="partition")


def make_blobs(
    num_classes: int,
    dim: int,
    n_per_class: int,
    separation: float,
    rng: np.random.Generator,
) -> Dataset:
    """Unit-covariance Gaussian clusters with means drawn as ``separation * N(0, I)``.

    Two such means are ``separation * sqrt(2 * dim)`` apart on average.
    """
    if min(num_classes, dim, n_per_class) <= 0 or separation < 0:
        raise ConfigurationError("blob parameters must be positive")
    means = separation * rng.standard_normal((num_classes, dim))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    return Dataset(features, labels, num_classes)


def stratified_split(ds: Dataset, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split; returns (selected, rest) index arrays.

    Raises if ``fraction`` would leave some present class with zero selected samples.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}", field="fraction")
    chosen, rest = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        take = int(round(fraction * len(idx)))
        if take < 1:
            raise ConfigurationError(
                f"fraction {fraction} selects no sample of class {c} ({len(idx)} available)",
                field="fraction",
            )
        idx = rng.permutation(idx)
        chosen.append(idx[:take])
        rest.append(idx[take:])
    return np.sort(np.concatenate(chosen)), np.sort(np.concatenate(rest))


def _pool(images: np.ndarray, factor: int) -> np.ndarray:
    n, ch, h, w = images.shape
    if h % factor or w % factor:
        raise ConfigurationError(f"downsample factor {factor} does not divide {h}x{w}", field="downsample")
    return images.reshape(n, ch, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def parse_cifar10(blob: bytes, downsample: int = 1, num_classes: int = 10) -> Dataset:
    """Decode CIFAR-10 binary records (1 label byte + 3072 channel-major pixel bytes)."""
    if downsample < 1:
        raise ConfigurationError("downsample must be >= 1", field="downsample")
    size = len(blob)
    side = CIFAR_SIDE // downsample
    if size == 0:
        log.warning("CIFAR-10 file is empty; returning an empty dataset")
        return Dataset(np.zeros((0, CIFAR_CHANNELS * side * side)), np.zeros(0, dtype=np.int64), num_classes)
    if size % CIFAR_RECORD_BYTES:
        whole = size // CIFAR_RECORD_BYTES
        raise ParseError(
            f"file size {size} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record "
            f"(truncated record {whole})",
            whole * CIFAR_RECORD_BYTES,
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        rec = int(bad[0])
        raise ParseError(f"record {rec} has label {labels[rec]} >= {num_classes}", rec * CIFAR_RECORD_BYTES)
    images = raw[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    if downsample > 1:
        images = _pool(images, downsample)
    return Dataset(images.reshape(images.shape[0], -1), labels, num_classes)


def load_cifar10(path: str | os.PathLike, downsample: int = 1) -> Dataset:
    with open(path, "rb") as fh:
        return parse_cifar10(fh.read(), downsample)


def encode_cifar10(labels, images_uint8) -> bytes:
    """Inverse of :func:`parse_cifar10` for raw (undownsampled) records."""
    labels = np.asarray(labels, dtype=np.uint8)
    images = np.asarray(images_uint8, dtype=np.uint8).reshape(len(labels), -1)
    if images.shape[1] != CIFAR_RECORD_BYTES - 1:
        raise ConfigurationError("each image needs 3072 bytes")
    return np.concatenate([labels[:, None], images], axis=1).tobytes()


def remap_classes(ds: Dataset, keep) -> Dataset:
    """Keep only the listed classes, relabelled 0..len(keep)-1 in the given order."""
    keep = list(keep)
    mask = np.isin(ds.labels, keep)
    lookup = {c: i for i, c in enumerate(keep)}
    labels = np.array([lookup[int(c)] for c in ds.labels[mask]], dtype=np.int64)
    return Dataset(ds.features[mask], labels, len(keep))


def write_csv(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim_{i}" for i in range(ds.dim)] + ["label"])
        for row, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def read_csv(path: str | os.PathLike, num_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "label":
        raise ConfigurationError(f"{path}: last CSV column must be 'label'")
    feats = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    c = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 0)
    return Dataset(feats, labels, c)


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    p = np.bincount(labels, minlength=num_classes) / max(len(labels), 1)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
