"""Representation-quality measurements for a trained encoder."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fedu import nn
from fedu import tensor as T
from fedu.data import Dataset, stratified_split
from fedu.errors import ConfigurationError, ContractError, DegenerateInputError
from fedu.params import ParameterSet, SgdConfig, sgd_step
from fedu.tensor import NORM_EPS, Tensor

EmbedFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EvalConfig:
    knn_k: int = 200
    knn_temperature: float = 0.1
    probe_epochs: int = 50
    probe_lr: float = 0.1
    probe_batch_size: int = 64
    finetune_epochs: int = 50
    finetune_lr: float = 0.05

    def __post_init__(self):
        for name in ("knn_k", "probe_epochs", "probe_batch_size", "finetune_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0", field=name)
        for name in ("knn_temperature", "probe_lr", "finetune_lr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0", field=name)


class MlpEncoder:
    """Frozen callable view of an MLP; calling it never records a tape."""

    def __init__(self, spec: nn.MlpSpec, params: ParameterSet):
        nn.check_matches(spec, params)
        self.spec = spec
        self.params = params

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return nn.apply(self.spec, self.params, x)


def identity_encoder(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _normalize_rows(z: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        raise DegenerateInputError(f"{what} embedding {bad[0]} has zero norm", row=int(bad[0]))
    return z / norms[:, None]


def knn_predict(
    train_emb: np.ndarray,
    train_labels: np.ndarray,
    query_emb: np.ndarray,
    num_classes: int,
    k: int,
    temperature: float,
    chunk: int = 1024,
) -> np.ndarray:
    """Temperature-weighted cosine kNN vote.

    Neighbours are ranked by similarity, ties broken by lower training index;
    class-score ties go to the lowest class index.
    """
    bank = _normalize_rows(np.asarray(train_emb, dtype=np.float64), "train")
    queries = _normalize_rows(np.asarray(query_emb, dtype=np.float64), "query")
    labels = np.asarray(train_labels, dtype=np.int64)
    k = min(k, bank.shape[0])
    preds = np.empty(queries.shape[0], dtype=np.int64)
    for start in range(0, queries.shape[0], chunk):
        sims = queries[start : start + chunk] @ bank.T
        nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        top = np.take_along_axis(sims, nearest, axis=1)
        votes = np.exp(top / temperature)
        scores = np.zeros((sims.shape[0], num_classes))
        rows = np.repeat(np.arange(sims.shape[0]), k)
        np.add.at(scores, (rows, labels[nearest].ravel()), votes.ravel())
        preds[start : start + chunk] = scores.argmax(axis=1)
    return preds


def knn_eval(encoder: EmbedFn, train: Dataset, test: Dataset, cfg: EvalConfig = EvalConfig()) -> float:
    """Top-1 accuracy of a kNN classifier over L2-normalized embeddings."""
    if len(train) == 0:
        raise ContractError("knn_eval needs a nonempty training set")
    if len(test) == 0:
        raise ContractError("knn_eval needs a nonempty test set")
    preds = knn_predict(
        encoder(train.features),
        train.labels,
        encoder(test.features),
        max(train.num_classes, test.num_classes),
        cfg.knn_k,
        cfg.knn_temperature,
    )
    return float(np.mean(preds == test.labels))


def _standardizer(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    return mu, sd


def _init_head(dim: int, num_classes: int) -> ParameterSet:
    return ParameterSet([("head.weight", np.zeros((dim, num_classes))), ("head.bias", np.zeros(num_classes))])


def _head_logits(head: ParameterSet, h: Tensor) -> Tensor:
    return T.bias_add(T.matmul(h, head["head.weight"]), head["head.bias"])


def linear_probe(
    encoder: EmbedFn,
    train_labeled: Dataset,
    test: Dataset,
    cfg: EvalConfig = EvalConfig(),
    rng: np.random.Generator | None = None,
) -> float:
    """Train a softmax-regression head on frozen, standardized embeddings."""
    if len(train_labeled) == 0:
        raise ContractError("linear_probe needs labeled training data")
    rng = rng if rng is not None else np.random.default_rng(0)
    z_train = encoder(train_labeled.features)
    mu, sd = _standardizer(z_train)
    z_train = (z_train - mu) / sd
    z_test = (encoder(test.features) - mu) / sd
    c = max(train_labeled.num_classes, test.num_classes)
    head = _init_head(z_train.shape[1], c)
    sgd = SgdConfig(cfg.probe_lr)
    n = z_train.shape[0]
    for _ in range(cfg.probe_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.probe_batch_size):
            idx = order[start : start + cfg.probe_batch_size]
            loss = T.cross_entropy(_head_logits(head, Tensor(z_train[idx])), train_labeled.labels[idx])
            loss.backward()
            sgd_step(head, sgd)
    logits = z_test @ head["head.weight"].data + head["head.bias"].data
    return float(np.mean(logits.argmax(axis=1) == test.labels))


@dataclass
class FinetuneResult:
    accuracy: float
    encoder: ParameterSet
    labeled_indices: np.ndarray


def finetune(
    spec: nn.MlpSpec,
    params: ParameterSet,
    labeled: Dataset,
    test: Dataset,
    cfg: EvalConfig = EvalConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[float, ParameterSet]:
    """Jointly train a copy of the encoder and a new linear head on ``labeled``.

    Embeddings pass through the same fixed standardization the probe uses,
    computed once from the initial encoder, so both start from the same
    feature scale.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    enc = params.copy()
    mu, sd = _standardizer(nn.apply(spec, enc, labeled.features))
    c = max(labeled.num_classes, test.num_classes)
    head = _init_head(spec.out_dim, c)
    sgd = SgdConfig(cfg.finetune_lr)
    n = len(labeled)
    inv_sd = 1.0 / sd
    for _ in range(cfg.finetune_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.probe_batch_size):
            idx = order[start : start + cfg.probe_batch_size]
            z = nn.forward(spec, enc, Tensor(labeled.features[idx]))
            z = T.mul(T.sub(z, Tensor(np.broadcast_to(mu, z.shape))), Tensor(np.broadcast_to(inv_sd, z.shape)))
            loss = T.cross_entropy(_head_logits(head, z), labeled.labels[idx])
            loss.backward()
            sgd_step(enc, sgd)
            sgd_step(head, sgd)
    z_test = (nn.apply(spec, enc, test.features) - mu) * inv_sd
    logits = z_test @ head["head.weight"].data + head["head.bias"].data
    return float(np.mean(logits.argmax(axis=1) == test.labels)), enc


def semi_supervised_finetune(
    spec: nn.MlpSpec,
    params: ParameterSet,
    train: Dataset,
    test: Dataset,
    labeled_fraction: float,
    cfg: EvalConfig = EvalConfig(),
    rng: np.random.Generator | None = None,
) -> FinetuneResult:
    """Fine-tune encoder + head on a class-stratified ``labeled_fraction`` of ``train``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    labeled_idx, _ = stratified_split(train, labeled_fraction, rng)
    acc, enc = finetune(spec, params, train.subset(labeled_idx), test, cfg, rng)
    return FinetuneResult(acc, enc, labeled_idx)


def export_embeddings(encoder: EmbedFn, ds: Dataset, path: str | os.PathLike) -> None:
    z = np.asarray(encoder(ds.features), dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim_{i}" for i in range(z.shape[1])] + ["label"])
        for row, y in zip(z, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def read_embeddings(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    z = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 1)
    return z, np.array([int(r[-1]) for r in body], dtype=np.int64)
