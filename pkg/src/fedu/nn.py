"""Fully connected ReLU networks over :class:`ParameterSet` storage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedu import tensor as T
from fedu.errors import ConfigurationError, ContractError
from fedu.params import ParameterSet
from fedu.tensor import Tensor


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; ReLU between layers, none after the last."""

    layer_widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ConfigurationError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ConfigurationError(f"layer widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    params = ParameterSet()
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params.add(f"layer{i}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.add(f"layer{i}.bias", rng.uniform(-bound, bound, size=(fan_out,)))
    return params


def expected_shapes(spec: MlpSpec) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i, (a, b) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        out.append((f"layer{i}.weight", (a, b)))
        out.append((f"layer{i}.bias", (b,)))
    return out


def check_matches(spec: MlpSpec, params: ParameterSet) -> None:
    """Raise naming the first parameter that does not fit ``spec``."""
    want = expected_shapes(spec)
    have = list(params.items())
    for i, (name, shape) in enumerate(want):
        if i >= len(have):
            raise ContractError(f"parameter {name!r} missing (expected shape {shape})")
        got_name, t = have[i]
        if got_name != name:
            raise ContractError(f"parameter {i} is {got_name!r}, expected {name!r}")
        if t.shape != shape:
            raise ContractError(f"parameter {name!r} has shape {t.shape}, expected {shape}")
    if len(have) > len(want):
        raise ContractError(f"unexpected extra parameter {have[len(want)][0]!r}")


def forward(spec: MlpSpec, params: ParameterSet, x: Tensor) -> Tensor:
    """Differentiable forward pass; records a tape through ``params``."""
    h = x
    for i in range(spec.num_layers):
        h = T.bias_add(T.matmul(h, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        if i < spec.num_layers - 1:
            h = T.relu(h)
    return h


def apply(spec: MlpSpec, params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Tape-free forward pass on raw arrays (evaluation, target branch)."""
    h = np.asarray(x, dtype=np.float64)
    for i in range(spec.num_layers):
        h = h @ params[f"layer{i}.weight"].data + params[f"layer{i}.bias"].data
        if i < spec.num_layers - 1:
            h = np.where(h > 0, h, 0.0)
    return h
