"""Client-side contrastive training with an online/target Siamese pair.

The online branch (encoder + predictor) is trained by SGD to predict the
target encoder's representation of a second view of the same sample; the
target encoder only ever moves by an exponential moving average of the
online encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedu import nn
from fedu import tensor as T
from fedu.errors import ConfigurationError
from fedu.params import ParameterSet, SgdConfig, sgd_step
from fedu.tensor import Tensor


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stochastic view generator for vector samples.

    Each view is ``x * (1 + scale_jitter * g) * mask + noise_sigma * z`` with a
    per-sample Gaussian ``g``, a Bernoulli keep-mask dropping each coordinate
    with probability ``mask_prob`` and i.i.d. Gaussian ``z``.
    """

    noise_sigma: float = 0.1
    mask_prob: float = 0.1
    scale_jitter: float = 0.1

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0", field="noise_sigma")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigurationError("mask_prob must lie in [0, 1]", field="mask_prob")
        if self.scale_jitter < 0:
            raise ConfigurationError("scale_jitter must be >= 0", field="scale_jitter")

    def view(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        batch = x if x.ndim == 2 else x[None, :]
        out = batch
        if self.scale_jitter > 0:
            out = out * (1.0 + self.scale_jitter * rng.standard_normal((batch.shape[0], 1)))
        if self.mask_prob > 0:
            out = out * (rng.random(batch.shape) >= self.mask_prob)
        if self.noise_sigma > 0:
            out = out + self.noise_sigma * rng.standard_normal(batch.shape)
        if out is batch:
            out = batch.copy()
        return out if x.ndim == 2 else out[0]


def augment_pair(x: np.ndarray, rng: np.random.Generator, policy: AugmentationPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Two independent views of a sample (or of every row of a batch)."""
    return policy.view(x, rng), policy.view(x, rng)


@dataclass
class OnlineNetwork:
    encoder_spec: nn.MlpSpec
    encoder: ParameterSet
    predictor_spec: nn.MlpSpec
    predictor: ParameterSet

    def __post_init__(self):
        rep = self.encoder_spec.out_dim
        if self.predictor_spec.in_dim != rep or self.predictor_spec.out_dim != rep:
            raise ConfigurationError(
                f"predictor {self.predictor_spec.layer_widths} must map the "
                f"{rep}-dim representation back to {rep} dims"
            )
        nn.check_matches(self.encoder_spec, self.encoder)
        nn.check_matches(self.predictor_spec, self.predictor)

    def __call__(self, x: Tensor) -> Tensor:
        return nn.forward(self.predictor_spec, self.predictor, nn.forward(self.encoder_spec, self.encoder, x))

    def copy(self) -> OnlineNetwork:
        return OnlineNetwork(self.encoder_spec, self.encoder.copy(), self.predictor_spec, self.predictor.copy())


@dataclass
class TargetNetwork:
    spec: nn.MlpSpec
    encoder: ParameterSet

    def __post_init__(self):
        nn.check_matches(self.spec, self.encoder)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return nn.apply(self.spec, self.encoder, x)

    @classmethod
    def from_online(cls, online: OnlineNetwork) -> TargetNetwork:
        return cls(online.encoder_spec, online.encoder.copy())


@dataclass(frozen=True)
class LocalTrainConfig:
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.032
    ema_decay: float = 0.99
    symmetric: bool = False

    def __post_init__(self):
        if self.local_epochs < 0:
            raise ConfigurationError("local_epochs must be >= 0", field="local_epochs")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be > 0", field="batch_size")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0", field="learning_rate")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigurationError("ema_decay must lie in [0, 1]", field="ema_decay")


def default_predictor_spec(rep_dim: int, hidden_factor: int = 2) -> nn.MlpSpec:
    return nn.MlpSpec((rep_dim, hidden_factor * rep_dim, rep_dim))


def forward_loss(online: OnlineNetwork, target: TargetNetwork, view: np.ndarray, target_view: np.ndarray) -> Tensor:
    """Loss of predicting the target representation of ``target_view`` from ``view``.

    The target branch is evaluated without a tape, so no gradient can reach
    the target encoder.
    """
    y = online(Tensor(view))
    y_target = Tensor(target(target_view))
    return T.contrastive_loss(T.l2_normalize(y), T.l2_normalize(y_target))


def ema_update(target: ParameterSet, online: ParameterSet, decay: float) -> None:
    """``target <- decay * target + (1 - decay) * online``, elementwise and in place."""
    target.check_congruent(online, "target and online encoders")
    for name, t in target.items():
        t.data = decay * t.data + (1.0 - decay) * online[name].data


@dataclass
class ClientState:
    """One party: its private samples and its online/target networks."""

    client_id: int
    features: np.ndarray
    online: OnlineNetwork
    target: TargetNetwork
    indices: np.ndarray | None = None
    last_divergence: float | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ConfigurationError(f"client {self.client_id} has no data")

    @property
    def num_samples(self) -> int:
        return int(self.features.shape[0])


@dataclass
class LocalTrainResult:
    batch_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.batch_losses)) if self.batch_losses else float("nan")


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def local_train(
    client: ClientState,
    config: LocalTrainConfig,
    rng: np.random.Generator,
    policy: AugmentationPolicy = AugmentationPolicy(),
) -> LocalTrainResult:
    """Run ``config.local_epochs`` epochs of SGD + EMA on the client's data.

    Every epoch visits the data in a fresh random order; the last incomplete
    batch is kept. Returns per-batch losses; the online encoder and predictor
    are updated in place and form the upload payload.
    """
    x = client.features
    n = x.shape[0]
    if n == 0:
        raise ConfigurationError(f"client {client.client_id} has an empty partition")
    sgd = SgdConfig(config.learning_rate) if config.learning_rate > 0 else None
    online, target = client.online, client.target
    result = LocalTrainResult()
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        epoch = []
        for start in range(0, n, config.batch_size):
            batch = x[order[start : start + config.batch_size]]
            t1, t2 = augment_pair(batch, rng, policy)
            loss = forward_loss(online, target, t1, t2)
            if config.symmetric:
                loss = T.scale(T.add(loss, forward_loss(online, target, t2, t1)), 0.5)
            loss.backward()
            if sgd is not None:
                sgd_step(online.encoder, sgd)
                sgd_step(online.predictor, sgd)
            else:
                online.encoder.zero_grad()
                online.predictor.zero_grad()
            ema_update(target.encoder, online.encoder, config.ema_decay)
            result.steps += 1
            epoch.append(loss.item())
        result.batch_losses.extend(epoch)
        result.epoch_losses.append(float(np.mean(epoch)))
    return result
