"""End-to-end experiment pipeline shared by the command line and the test suites."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from fedu import data, nn
from fedu import rng as rngs
from fedu.config import ExperimentConfig
from fedu.data import Dataset, Partition
from fedu.errors import ConfigurationError, FeduError
from fedu.evaluation import MlpEncoder, knn_eval, linear_probe
from fedu.federated import (
    ClientRoundMetrics,
    RoundMetrics,
    ServerState,
    divergence,
    init_clients,
    init_server,
    run_training,
)
from fedu.local import ClientState, OnlineNetwork, TargetNetwork, local_train
from fedu.params import ParameterSet, save

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
MODES = ("fedu", "single_client", "centralized")
SWEEP_AXES = ("mu", "local_epochs", "num_clients", "batch_size")


@dataclass
class RunSummary:
    mode: str
    knn_accuracy: float
    probe_accuracy: float
    rounds_completed: int
    metrics_path: str | None
    checkpoint_paths: list[str]
    config: dict[str, Any]
    wall_time_s: float
    per_client: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class RunResult:
    summary: RunSummary
    encoder: ParameterSet
    rounds: list[RoundMetrics]


# data ------------------------------------------------------------------


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and test sets for the configured source; both are deterministic in the seed."""
    if cfg.dataset == "blobs":
        per_class = cfg.train_per_class + cfg.test_per_class
        full = data.make_blobs(cfg.num_classes, cfg.dim, per_class, cfg.separation, rngs.stream(cfg.seed, rngs.DATA))
        test_idx, train_idx = data.stratified_split(full, cfg.test_per_class / per_class, rngs.stream(cfg.seed, rngs.DATA, 1))
        return full.subset(train_idx), full.subset(test_idx)
    train = data.load_cifar10(cfg.cifar_train_path, cfg.cifar_downsample)
    test = data.load_cifar10(cfg.cifar_test_path, cfg.cifar_downsample)
    if cfg.cifar_classes is not None:
        train = data.remap_classes(train, cfg.cifar_classes)
        test = data.remap_classes(test, cfg.cifar_classes)
    if len(train) == 0:
        raise ConfigurationError("CIFAR training file holds no records of the selected classes", field="cifar_train_path")
    return train, test


def build_partition(cfg: ExperimentConfig, train: Dataset) -> Partition:
    part = data.make_partition(train, cfg.partition, cfg.num_clients, rngs.stream(cfg.seed, rngs.PARTITION))
    part.validate(len(train))
    return part


# metrics ---------------------------------------------------------------


class MetricsWriter:
    """Append-only JSONL writer; every line is flushed so partial runs stay readable."""

    def __init__(self, path: Path | None):
        self.path = path
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict[str, Any]) -> None:
        if self._fh is None:
            return
        self._fh.write(json.dumps({"schema_version": METRICS_SCHEMA_VERSION, **record}) + "\n")
        self._fh.flush()

    def write_round(self, m: RoundMetrics) -> None:
        for c in m.clients:
            self.write({"kind": "client", "round": m.round, **asdict(c)})
        self.write(
            {
                "kind": "round",
                "round": m.round,
                "clients": [c.client_id for c in m.clients],
                "mean_loss": m.mean_loss,
                "mean_divergence": m.mean_divergence,
                "global_predictor_count": sum(c.dapu_decision == "global" for c in m.clients),
                "knn_accuracy": m.knn_accuracy,
            }
        )

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# evaluation ------------------------------------------------------------


def evaluate_encoder(cfg: ExperimentConfig, encoder: ParameterSet, train: Dataset, test: Dataset) -> tuple[float, float]:
    """Final kNN and linear-probe accuracies; the probe stream depends only on the seed."""
    enc = MlpEncoder(cfg.encoder_spec(), encoder)
    ecfg = cfg.eval_config()
    knn = knn_eval(enc, train, test, ecfg)
    probe = linear_probe(enc, train, test, ecfg, rngs.stream(cfg.seed, rngs.EVAL))
    return knn, probe


def _periodic_hooks(cfg, out_dir, train, test, writer, checkpoints, extra: Callable | None):
    spec = cfg.encoder_spec()

    def hook(encoder: ParameterSet, m: RoundMetrics) -> None:
        done = m.round + 1
        if cfg.eval_interval and done % cfg.eval_interval == 0:
            m.knn_accuracy = knn_eval(MlpEncoder(spec, encoder), train, test, cfg.eval_config())
        writer.write_round(m)
        if out_dir is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            path = out_dir / "checkpoints" / f"encoder_round{done:04d}.ckpt"
            path.parent.mkdir(parents=True, exist_ok=True)
            save(encoder, path)
            checkpoints.append(str(path))
        if extra is not None:
            extra(encoder, m)

    return hook


def _finish(cfg, mode, out_dir, encoder, predictor, train, test, writer, checkpoints, rounds, started, per_client=()):
    writer.close()
    knn, probe = evaluate_encoder(cfg, encoder, train, test)
    if out_dir is not None:
        for name, params in (("encoder", encoder), ("predictor", predictor)):
            path = out_dir / f"{name}.ckpt"
            save(params, path)
            checkpoints.append(str(path))
    summary = RunSummary(
        mode=mode,
        knn_accuracy=knn,
        probe_accuracy=probe,
        rounds_completed=rounds,
        metrics_path=str(writer.path) if writer.path is not None else None,
        checkpoint_paths=checkpoints,
        config=cfg.to_dict(),
        wall_time_s=time.perf_counter() - started,
        per_client=list(per_client),
    )
    if out_dir is not None:
        (out_dir / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    return summary


def _prepare_dir(out_dir: str | Path | None) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# runs ------------------------------------------------------------------


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    workers: int | None = None,
    datasets: tuple[Dataset, Dataset] | None = None,
    on_round: Callable[[ParameterSet, RoundMetrics], None] | None = None,
) -> RunResult:
    """Federated training followed by kNN and probe evaluation.

    With ``out_dir`` set, writes ``metrics.jsonl``, checkpoints and
    ``summary.json`` there; otherwise everything stays in memory.
    """
    started = time.perf_counter()
    out = _prepare_dir(out_dir)
    train, test = datasets if datasets is not None else build_datasets(cfg)
    part = build_partition(cfg, train)
    fed = cfg.fed_config(workers)
    server = init_server(cfg.encoder_spec(), cfg.predictor_spec(), cfg.seed)
    clients = init_clients(server, {k: train.features[part[k]] for k in part.clients()})
    for k, c in clients.items():
        c.indices = part[k]
    writer = MetricsWriter(out / "metrics.jsonl" if out else None)
    checkpoints: list[str] = []
    hook = _periodic_hooks(cfg, out, train, test, writer, checkpoints, on_round)
    try:
        encoder, rounds = run_training(server, clients, fed, cfg.rounds, lambda s, m: hook(s.global_encoder, m))
    finally:
        writer.close()
    summary = _finish(cfg, "fedu", out, encoder, server.global_predictor, train, test, writer, checkpoints, len(rounds), started)
    return RunResult(summary, encoder, rounds)


def train_standalone(
    cfg: ExperimentConfig,
    features: np.ndarray,
    client_id: int,
    on_round: Callable[[ClientState, RoundMetrics], None] | None = None,
) -> tuple[ClientState, list[RoundMetrics]]:
    """One party training alone for ``cfg.rounds`` rounds of ``cfg.local_epochs`` epochs.

    Uses the same initialization and per-round random streams a federated
    client with this id would receive, without any server exchange.
    """
    server = init_server(cfg.encoder_spec(), cfg.predictor_spec(), cfg.seed)
    online = OnlineNetwork(server.encoder_spec, server.global_encoder, server.predictor_spec, server.global_predictor)
    client = ClientState(client_id, features, online, TargetNetwork.from_online(online))
    train_cfg, policy = cfg.train_config(), cfg.augmentation()
    history = []
    for r in range(cfg.rounds):
        start_encoder = client.online.encoder.copy()
        t0 = time.perf_counter()
        result = local_train(client, train_cfg, rngs.client_stream(cfg.seed, client_id, r), policy)
        div = divergence(client.online.encoder, start_encoder)
        client.last_divergence = div
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_time else None
        m = RoundMetrics(r, [ClientRoundMetrics(client_id, client.num_samples, 1.0, result.mean_loss, div, "local", result.steps, wall)])
        if on_round is not None:
            on_round(client, m)
        history.append(m)
    return client, history


def run_baseline(
    cfg: ExperimentConfig,
    mode: str,
    out_dir: str | Path | None = None,
    datasets: tuple[Dataset, Dataset] | None = None,
    client_ids: Sequence[int] | None = None,
) -> RunSummary:
    """``centralized`` trains on the undivided training set; ``single_client``
    trains each listed client's partition alone (all clients by default) and
    reports the mean accuracy, with per-client results alongside."""
    if mode not in ("single_client", "centralized"):
        raise ConfigurationError(f"baseline mode must be single_client or centralized, got {mode!r}", field="mode")
    started = time.perf_counter()
    out = _prepare_dir(out_dir)
    train, test = datasets if datasets is not None else build_datasets(cfg)
    spec = cfg.encoder_spec()
    if mode == "centralized":
        jobs = [(0, np.arange(len(train)))]
    else:
        part = build_partition(cfg, train)
        ids = part.clients() if client_ids is None else list(client_ids)
        for cid in ids:
            if cid not in part.assignments:
                raise ConfigurationError(f"no client {cid} among {part.clients()}", field="client")
        jobs = [(cid, part[cid]) for cid in ids]

    writer = MetricsWriter(out / "metrics.jsonl" if out else None)
    per_client, checkpoints = [], []
    last = None
    try:
        for cid, idx in jobs:
            interval = cfg.eval_interval

            def hook(client: ClientState, m: RoundMetrics) -> None:
                if interval and (m.round + 1) % interval == 0:
                    m.knn_accuracy = knn_eval(MlpEncoder(spec, client.online.encoder), train, test, cfg.eval_config())
                writer.write_round(m)

            client, _ = train_standalone(cfg, train.features[idx], cid, hook)
            knn, probe = evaluate_encoder(cfg, client.online.encoder, train, test)
            classes = sorted(int(c) for c in np.unique(train.labels[idx]))
            per_client.append({"client_id": cid, "num_samples": len(idx), "classes": classes, "knn_accuracy": knn, "probe_accuracy": probe})
            if out is not None and len(jobs) > 1:
                path = out / f"encoder_client{cid}.ckpt"
                save(client.online.encoder, path)
                checkpoints.append(str(path))
            last = client
    finally:
        writer.close()

    if len(jobs) == 1:
        return _finish(cfg, mode, out, last.online.encoder, last.online.predictor, train, test, writer, checkpoints, cfg.rounds, started, per_client)
    summary = RunSummary(
        mode=mode,
        knn_accuracy=float(np.mean([p["knn_accuracy"] for p in per_client])),
        probe_accuracy=float(np.mean([p["probe_accuracy"] for p in per_client])),
        rounds_completed=cfg.rounds,
        metrics_path=str(writer.path) if writer.path is not None else None,
        checkpoint_paths=checkpoints,
        config=cfg.to_dict(),
        wall_time_s=time.perf_counter() - started,
        per_client=per_client,
    )
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    return summary


# sweeps ----------------------------------------------------------------


def parse_axis_values(axis: str, raw: Sequence[str]) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}", field="axis")
    cast = float if axis == "mu" else int
    try:
        return [cast(v) for v in raw]
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {axis}: {exc}", field="values") from None


def sweep_config(cfg: ExperimentConfig, axis: str, value, adjust_lr: bool = False) -> ExperimentConfig:
    """Configuration for one sweep point.

    The local-epoch sweep keeps ``local_epochs * rounds`` fixed; the batch-size
    sweep optionally rescales the learning rate linearly in the batch size
    relative to ``lr_reference_batch``.
    """
    if axis == "mu":
        return cfg.replace(mu=float(value))
    if axis == "local_epochs":
        total = cfg.local_epochs * cfg.rounds
        if value <= 0 or total % value:
            raise ConfigurationError(f"local_epochs={value} does not divide the fixed budget E*R={total}", field="local_epochs")
        return cfg.replace(local_epochs=int(value), rounds=total // int(value))
    if axis == "num_clients":
        return cfg.replace(num_clients=int(value), clients_per_round=None)
    if axis == "batch_size":
        if adjust_lr:
            return cfg.replace(batch_size=int(value), learning_rate=value * cfg.learning_rate / cfg.lr_reference_batch)
        return cfg.replace(batch_size=int(value))
    raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}", field="axis")


SWEEP_COLUMNS = (
    "axis", "value", "status", "rounds", "local_epochs", "batch_size", "learning_rate",
    "mu", "num_clients", "knn_accuracy", "probe_accuracy", "error",
)


def run_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: Sequence,
    out_dir: str | Path,
    adjust_lr: bool = False,
    workers: int | None = None,
) -> list[dict[str, Any]]:
    """One run per value; failures are recorded in the table and do not stop the sweep."""
    out = _prepare_dir(out_dir)
    rows = []
    for value in values:
        row: dict[str, Any] = {"axis": axis, "value": value, "status": "ok", "error": ""}
        try:
            point = sweep_config(cfg, axis, value, adjust_lr)
            row.update(
                rounds=point.rounds, local_epochs=point.local_epochs, batch_size=point.batch_size,
                learning_rate=point.learning_rate, mu=point.mu, num_clients=point.num_clients,
            )
            summary = run_experiment(point, out / f"{axis}={value}", workers).summary
            row.update(knn_accuracy=summary.knn_accuracy, probe_accuracy=summary.probe_accuracy)
        except FeduError as exc:
            log.error("sweep point %s=%s failed: %s", axis, value, exc)
            row.update(status="failed", error=str(exc))
        rows.append(row)
        write_sweep_csv(rows, out / "sweep.csv")
    return rows


def write_sweep_csv(rows: Sequence[dict[str, Any]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# inspection ------------------------------------------------------------


def evaluate_checkpoint(cfg: ExperimentConfig, params: ParameterSet) -> dict[str, float]:
    nn.check_matches(cfg.encoder_spec(), params)
    train, test = build_datasets(cfg)
    knn, probe = evaluate_encoder(cfg, params, train, test)
    return {"knn_accuracy": knn, "probe_accuracy": probe}


def inspect_partition(cfg: ExperimentConfig) -> list[dict[str, Any]]:
    train, _ = build_datasets(cfg)
    part = build_partition(cfg, train)
    report = []
    for cid in part.clients():
        labels = train.labels[part[cid]]
        counts = np.bincount(labels, minlength=train.num_classes)
        report.append(
            {
                "client_id": cid,
                "num_samples": int(len(labels)),
                "class_counts": counts.tolist(),
                "label_entropy": data.label_entropy(labels, train.num_classes),
            }
        )
    return report


def initial_server(cfg: ExperimentConfig) -> ServerState:
    return init_server(cfg.encoder_spec(), cfg.predictor_spec(), cfg.seed)
