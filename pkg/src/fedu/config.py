"""Flat YAML experiment configuration with line-accurate validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from fedu import nn
from fedu.errors import ConfigurationError
from fedu.evaluation import EvalConfig
from fedu.federated import FedConfig, ProtocolConfig, SelectionConfig
from fedu.local import AugmentationPolicy, LocalTrainConfig

OUTPUT_DIR_ENV = "FEDU_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one experiment. Defaults form the blobs benchmark preset."""

    # data
    dataset: str = "blobs"
    num_classes: int = 10
    dim: int = 16
    train_per_class: int = 100
    test_per_class: int = 50
    separation: float = 1.5
    cifar_train_path: str | None = None
    cifar_test_path: str | None = None
    cifar_downsample: int = 4
    cifar_classes: list | None = None
    # federation
    partition: str = "noniid"
    num_clients: int = 5
    clients_per_round: int | None = None
    rounds: int = 100
    aggregate: str = "online"
    update: str = "online"
    predictor: str = "dapu"
    mu: float = 0.2
    # local training
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    ema_decay: float = 0.99
    symmetric_loss: bool = False
    noise_sigma: float = 0.3
    mask_prob: float = 0.3
    scale_jitter: float = 0.3
    encoder_hidden: list = field(default_factory=lambda: [64])
    representation_dim: int = 32
    predictor_hidden: int | None = None  # None: twice representation_dim
    # evaluation
    knn_k: int = 200
    knn_temperature: float = 0.1
    probe_epochs: int = 50
    probe_lr: float = 0.1
    probe_batch_size: int = 64
    eval_interval: int = 0
    # sweeps
    lr_reference_batch: int = 128
    # bookkeeping
    seed: int = 0
    workers: int = 1
    output_dir: str | None = None
    checkpoint_interval: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        if self.dataset not in ("blobs", "cifar10"):
            raise ConfigurationError(f"dataset must be 'blobs' or 'cifar10', got {self.dataset!r}", field="dataset")
        if self.dataset == "cifar10":
            for key in ("cifar_train_path", "cifar_test_path"):
                path = getattr(self, key)
                if path is None:
                    raise ConfigurationError(f"{key} is required when dataset is cifar10", field=key)
                if not Path(path).is_file():
                    raise ConfigurationError(f"{key}: no such file {path!r}", field=key)
        positive = (
            "num_classes", "dim", "train_per_class", "test_per_class", "num_clients",
            "representation_dim", "cifar_downsample", "lr_reference_batch", "workers",
        )
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigurationError(f"{key} must be > 0, got {getattr(self, key)}", field=key)
        for key in ("rounds", "eval_interval", "checkpoint_interval"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"{key} must be >= 0, got {getattr(self, key)}", field=key)
        if self.predictor_hidden is not None and self.predictor_hidden <= 0:
            raise ConfigurationError("predictor_hidden must be > 0", field="predictor_hidden")
        if self.separation < 0:
            raise ConfigurationError("separation must be >= 0", field="separation")
        if self.partition not in ("iid", "noniid"):
            raise ConfigurationError(f"partition must be 'iid' or 'noniid', got {self.partition!r}", field="partition")
        if self.dataset == "blobs" and self.partition == "noniid" and self.num_classes % self.num_clients:
            raise ConfigurationError(
                f"non-IID split needs num_classes ({self.num_classes}) divisible by num_clients ({self.num_clients})",
                field="num_clients",
            )
        if any(not isinstance(w, int) or isinstance(w, bool) or w <= 0 for w in self.encoder_hidden):
            raise ConfigurationError("encoder_hidden must be a list of positive ints", field="encoder_hidden")
        if self.cifar_classes is not None and (
            len(set(self.cifar_classes)) != len(self.cifar_classes)
            or any(not isinstance(c, int) or not 0 <= c < 10 for c in self.cifar_classes)
        ):
            raise ConfigurationError("cifar_classes must be distinct ints in [0, 10)", field="cifar_classes")
        # build every sub-config once so invalid combinations surface at load time
        self.protocol()
        self.train_config()
        self.augmentation()
        self.selection()
        self.eval_config()

    # sub-configs -------------------------------------------------------

    def protocol(self) -> ProtocolConfig:
        for key, allowed in (
            ("aggregate", ("online", "target")),
            ("update", ("online", "target", "both")),
            ("predictor", ("local", "global", "dapu")),
        ):
            if getattr(self, key) not in allowed:
                raise ConfigurationError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}", field=key)
        return ProtocolConfig(self.aggregate, self.update, self.predictor, self.mu)

    def train_config(self) -> LocalTrainConfig:
        return LocalTrainConfig(self.local_epochs, self.batch_size, self.learning_rate, self.ema_decay, self.symmetric_loss)

    def augmentation(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.noise_sigma, self.mask_prob, self.scale_jitter)

    def selection(self) -> SelectionConfig:
        per_round = self.num_clients if self.clients_per_round is None else self.clients_per_round
        return SelectionConfig(self.num_clients, per_round)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            knn_k=self.knn_k,
            knn_temperature=self.knn_temperature,
            probe_epochs=self.probe_epochs,
            probe_lr=self.probe_lr,
            probe_batch_size=self.probe_batch_size,
        )

    def fed_config(self, workers: int | None = None) -> FedConfig:
        return FedConfig(
            protocol=self.protocol(),
            train=self.train_config(),
            selection=self.selection(),
            augmentation=self.augmentation(),
            seed=self.seed,
            workers=self.workers if workers is None else workers,
            record_wall_time=self.record_wall_time,
        )

    def input_dim(self) -> int:
        if self.dataset == "blobs":
            return self.dim
        side = 32 // self.cifar_downsample
        return 3 * side * side

    def encoder_spec(self) -> nn.MlpSpec:
        return nn.MlpSpec((self.input_dim(), *self.encoder_hidden, self.representation_dim))

    def predictor_spec(self) -> nn.MlpSpec:
        hidden = 2 * self.representation_dim if self.predictor_hidden is None else self.predictor_hidden
        return nn.MlpSpec((self.representation_dim, hidden, self.representation_dim))

    def resolved_output_dir(self) -> Path:
        if self.output_dir is not None:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
# keys whose default is None, with the type a non-null value must have
_OPTIONAL = {
    "cifar_train_path": str,
    "cifar_test_path": str,
    "cifar_classes": list,
    "clients_per_round": int,
    "predictor_hidden": int,
    "output_dir": str,
}


def _default(name: str):
    f = FIELDS[name]
    return f.default_factory() if f.default is dataclasses.MISSING else f.default


def _coerce(name: str, value: Any, line: int | None) -> Any:
    expected = _OPTIONAL.get(name) or type(_default(name))
    if value is None:
        if name in _OPTIONAL:
            return None
        raise ConfigurationError(f"{name} may not be empty", field=name, line=line)
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigurationError(
            f"{name} must be of type {expected.__name__}, got {type(value).__name__} {value!r}", field=name, line=line
        )
    return value


def config_from_mapping(data: Mapping[str, Any], lines: Mapping[str, int] | None = None) -> ExperimentConfig:
    """Validate a flat key/value mapping; ``lines`` maps keys to 1-based source lines."""
    lines = lines or {}
    values = {}
    for key, value in data.items():
        line = lines.get(key)
        if key not in FIELDS:
            raise ConfigurationError(f"unknown key {key!r}", field=str(key), line=line)
        values[key] = _coerce(key, value, line)
    try:
        return ExperimentConfig(**values)
    except ConfigurationError as exc:
        if exc.field in lines and exc.line is None:
            raise ConfigurationError(exc.message, field=exc.field, line=lines[exc.field]) from None
        raise


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigurationError(f"{source}: malformed YAML: {problem}", line=mark.line + 1 if mark else None) from None
    if root is None:
        return ExperimentConfig()
    if not isinstance(root, yaml.MappingNode):
        raise ConfigurationError(f"{source}: top level must be a mapping of keys to values", line=root.start_mark.line + 1)
    lines = {}
    for key_node, _ in root.value:
        key = key_node.value
        if key in lines:
            raise ConfigurationError(f"duplicate key {key!r}", field=key, line=key_node.start_mark.line + 1)
        lines[key] = key_node.start_mark.line + 1
    data = yaml.safe_load(text)
    return config_from_mapping(data, lines)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
