"""Server-side round orchestration for federated contrastive learning.

A round selects clients, pushes the global encoder/predictor to them according
to the communication protocol, lets each train locally, measures how far each
online encoder drifted from what it was sent, and aggregates the uploads with
data-volume weights.
"""

from __future__ import annotations

import enum
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from fedu import nn
from fedu import rng as rngs
from fedu.errors import ConfigurationError, ContractError
from fedu.local import (
    AugmentationPolicy,
    ClientState,
    LocalTrainConfig,
    OnlineNetwork,
    TargetNetwork,
    local_train,
)
from fedu.params import ParameterSet
from fedu.tensor import Tensor

WEIGHT_SUM_TOL = 1e-12


class Encoder(str, enum.Enum):
    ONLINE = "online"
    TARGET = "target"
    BOTH = "both"


class PredictorPolicy(str, enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"
    DAPU = "dapu"


class Decision(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


@dataclass(frozen=True)
class ProtocolConfig:
    """Which encoder is uploaded, which is overwritten, and how predictors are refreshed."""

    aggregate_source: Encoder = Encoder.ONLINE
    update_target: Encoder = Encoder.ONLINE
    predictor_policy: PredictorPolicy = PredictorPolicy.DAPU
    mu: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "aggregate_source", Encoder(self.aggregate_source))
        object.__setattr__(self, "update_target", Encoder(self.update_target))
        object.__setattr__(self, "predictor_policy", PredictorPolicy(self.predictor_policy))
        if self.aggregate_source is Encoder.BOTH:
            raise ConfigurationError("aggregate_source must be 'online' or 'target'", field="aggregate")
        if self.predictor_policy is PredictorPolicy.DAPU and not self.mu > 0:
            raise ConfigurationError(f"mu must be > 0, got {self.mu}", field="mu")

    @property
    def label(self) -> str:
        pred = f"dapu({self.mu:g})" if self.predictor_policy is PredictorPolicy.DAPU else self.predictor_policy.value
        return f"{self.aggregate_source.value}/{self.update_target.value}/{pred}"


@dataclass
class ServerState:
    encoder_spec: nn.MlpSpec
    predictor_spec: nn.MlpSpec
    global_encoder: ParameterSet
    global_predictor: ParameterSet
    round: int = 0
    # encoder distributed at the start of the most recently completed round
    previous_global: ParameterSet | None = None


@dataclass(frozen=True)
class ClientRoundMetrics:
    client_id: int
    num_samples: int
    weight: float
    mean_loss: float
    divergence: float
    dapu_decision: str
    steps: int
    wall_ms: float | None = None


@dataclass
class RoundMetrics:
    round: int
    clients: list[ClientRoundMetrics] = field(default_factory=list)
    knn_accuracy: float | None = None

    @property
    def mean_loss(self) -> float:
        return float(np.mean([c.mean_loss for c in self.clients]))

    @property
    def mean_divergence(self) -> float:
        return float(np.mean([c.divergence for c in self.clients]))


@dataclass(frozen=True)
class SelectionConfig:
    num_clients: int
    clients_per_round: int

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigurationError(
                f"need 1 <= clients_per_round ({self.clients_per_round}) <= num_clients ({self.num_clients})",
                field="clients_per_round",
            )


@dataclass(frozen=True)
class FedConfig:
    """Everything a round needs besides the mutable server and client states."""

    protocol: ProtocolConfig
    train: LocalTrainConfig
    selection: SelectionConfig
    augmentation: AugmentationPolicy = AugmentationPolicy()
    seed: int = 0
    workers: int = 1
    record_wall_time: bool = False


def aggregate(models: Sequence[ParameterSet], weights: Sequence[float]) -> ParameterSet:
    """Weighted elementwise average of congruent parameter sets.

    Computed as ``m0 + sum_k w_k (m_k - m0)``, which equals ``sum_k w_k m_k``
    when the weights sum to one and returns ``m0`` bitwise when all models
    coincide.
    """
    if not models:
        raise ContractError("aggregate needs at least one model")
    if len(models) != len(weights):
        raise ContractError(f"{len(models)} models but {len(weights)} weights")
    w = [float(x) for x in weights]
    if any(x < 0 or not np.isfinite(x) for x in w):
        raise ContractError(f"aggregation weights must be finite and nonnegative, got {w}")
    if abs(sum(w) - 1.0) > WEIGHT_SUM_TOL:
        raise ContractError(f"aggregation weights sum to {sum(w)!r}, not 1")
    ref = models[0]
    for i, m in enumerate(models[1:], start=1):
        ref.check_congruent(m, f"model 0 and model {i}")
    out = ParameterSet()
    for name, t in ref.items():
        acc = t.data.copy()
        for m, wk in zip(models[1:], w[1:]):
            acc += wk * (m[name].data - t.data)
        out.add(name, Tensor(acc))
    return out


def divergence(theta: ParameterSet, phi_prev: ParameterSet) -> float:
    """Squared L2 distance between two congruent parameter sets."""
    theta.check_congruent(phi_prev, "divergence operands")
    total = 0.0
    for name, t in theta.items():
        d = t.data - phi_prev[name].data
        total += float(np.dot(d.ravel(), d.ravel()))
    return total


def dapu_decide(div: float, mu: float) -> Decision:
    """Adopt the global predictor only while the encoder drift stays strictly below ``mu``."""
    return Decision.GLOBAL if div < mu else Decision.LOCAL


def aggregation_weights(sizes: Sequence[int]) -> list[float]:
    total = float(sum(sizes))
    return [n / total for n in sizes]


def predictor_decision(client: ClientState, server: ServerState, protocol: ProtocolConfig) -> Decision:
    policy = protocol.predictor_policy
    if policy is PredictorPolicy.GLOBAL:
        return Decision.GLOBAL
    if policy is PredictorPolicy.LOCAL:
        return Decision.LOCAL
    # no earlier distribution to compare against before round 1
    if server.round == 0 or client.last_divergence is None:
        return Decision.LOCAL
    return dapu_decide(client.last_divergence, protocol.mu)


def update_clients(
    server: ServerState, clients: Sequence[ClientState], protocol: ProtocolConfig
) -> dict[int, Decision]:
    """Push the global encoder/predictor into the selected clients."""
    decisions = {}
    for client in clients:
        decision = predictor_decision(client, server, protocol)
        if protocol.update_target in (Encoder.ONLINE, Encoder.BOTH):
            client.online.encoder.assign(server.global_encoder)
        if protocol.update_target in (Encoder.TARGET, Encoder.BOTH):
            client.target.encoder.assign(server.global_encoder)
        if decision is Decision.GLOBAL:
            client.online.predictor.assign(server.global_predictor)
        decisions[client.client_id] = decision
    return decisions


def select_clients(selection: SelectionConfig, seed: int, round_index: int) -> list[int]:
    if selection.clients_per_round == selection.num_clients:
        return list(range(selection.num_clients))
    rng = rngs.stream(seed, rngs.SELECT, round_index)
    chosen = rng.choice(selection.num_clients, size=selection.clients_per_round, replace=False)
    return sorted(int(c) for c in chosen)


def init_server(encoder_spec: nn.MlpSpec, predictor_spec: nn.MlpSpec, seed: int) -> ServerState:
    rng = rngs.stream(seed, rngs.INIT)
    return ServerState(
        encoder_spec=encoder_spec,
        predictor_spec=predictor_spec,
        global_encoder=nn.init_mlp(encoder_spec, rng),
        global_predictor=nn.init_mlp(predictor_spec, rng),
    )


def init_clients(server: ServerState, client_data: Mapping[int, np.ndarray]) -> dict[int, ClientState]:
    """Clients start from copies of the global model; targets copy the online encoder."""
    out = {}
    for cid in sorted(client_data):
        online = OnlineNetwork(
            server.encoder_spec,
            server.global_encoder.copy(),
            server.predictor_spec,
            server.global_predictor.copy(),
        )
        out[cid] = ClientState(cid, client_data[cid], online, TargetNetwork.from_online(online))
    return out


def _train_one(client: ClientState, cfg: FedConfig, round_index: int, sent: ParameterSet, decision: Decision):
    start = time.perf_counter()
    result = local_train(client, cfg.train, rngs.client_stream(cfg.seed, client.client_id, round_index), cfg.augmentation)
    div = divergence(client.online.encoder, sent)
    client.last_divergence = div
    wall = (time.perf_counter() - start) * 1000.0 if cfg.record_wall_time else None
    return result, div, wall


def run_round(server: ServerState, clients: Mapping[int, ClientState], cfg: FedConfig) -> RoundMetrics:
    """One update -> local training -> upload -> aggregation cycle."""
    r = server.round
    selected = [clients[cid] for cid in select_clients(cfg.selection, cfg.seed, r)]
    sent = server.global_encoder.copy()
    decisions = update_clients(server, selected, cfg.protocol)

    jobs = [(c, cfg, r, sent, decisions[c.client_id]) for c in selected]
    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(lambda job: _train_one(*job), jobs))
    else:
        outcomes = [_train_one(*job) for job in jobs]

    weights = aggregation_weights([c.num_samples for c in selected])
    if cfg.protocol.aggregate_source is Encoder.ONLINE:
        uploads = [c.online.encoder for c in selected]
    else:
        uploads = [c.target.encoder for c in selected]
    server.global_encoder = aggregate(uploads, weights)
    server.global_predictor = aggregate([c.online.predictor for c in selected], weights)
    server.previous_global = sent
    server.round = r + 1

    metrics = RoundMetrics(round=r)
    for c, w, (result, div, wall) in zip(selected, weights, outcomes):
        metrics.clients.append(
            ClientRoundMetrics(
                client_id=c.client_id,
                num_samples=c.num_samples,
                weight=w,
                mean_loss=result.mean_loss,
                divergence=div,
                dapu_decision=decisions[c.client_id].value,
                steps=result.steps,
                wall_ms=wall,
            )
        )
    return metrics


def run_training(
    server: ServerState,
    clients: Mapping[int, ClientState],
    cfg: FedConfig,
    rounds: int,
    on_round: Callable[[ServerState, RoundMetrics], None] | None = None,
) -> tuple[ParameterSet, list[RoundMetrics]]:
    """Run ``rounds`` rounds; returns the final global encoder and per-round metrics."""
    if rounds < 0:
        raise ConfigurationError("rounds must be >= 0", field="rounds")
    if sorted(clients) != list(range(cfg.selection.num_clients)):
        raise ConfigurationError(
            f"expected client ids 0..{cfg.selection.num_clients - 1}, got {sorted(clients)}"
        )
    log = []
    for _ in range(rounds):
        m = run_round(server, clients, cfg)
        if on_round is not None:
            on_round(server, m)
        log.append(m)
    return server.global_encoder, log
