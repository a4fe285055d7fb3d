"""Named parameter collections, plain SGD, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      4 bytes  b"FDUP"
    version    uint32   (currently 1)
    count      uint32   number of entries
    per entry:
      name_len uint32, name (UTF-8, name_len bytes)
      rank     uint32, dims rank x uint64
      data     prod(dims) x float64, row-major
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from fedu.errors import ConfigurationError, ContractError, ParseError
from fedu.tensor import Tensor

MAGIC = b"FDUP"
FORMAT_VERSION = 1


class ParameterSet:
    """Ordered ``name -> Tensor`` mapping; the unit the server exchanges with clients."""

    def __init__(self, entries=()):
        self._entries: dict[str, Tensor] = {}
        for name, value in entries:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self._entries.values()]

    def num_values(self) -> int:
        return int(np.sum([t.size for t in self._entries.values()], dtype=np.int64))

    def is_congruent(self, other: ParameterSet) -> bool:
        return self.names() == other.names() and self.shapes() == other.shapes()

    def check_congruent(self, other: ParameterSet, what: str = "parameter sets") -> None:
        if self.names() != other.names():
            mine, theirs = self.names(), other.names()
            for i in range(max(len(mine), len(theirs))):
                a = mine[i] if i < len(mine) else None
                b = theirs[i] if i < len(theirs) else None
                if a != b:
                    raise ContractError(f"{what} are not congruent: entry {i} is {a!r} vs {b!r}")
        for name in self._entries:
            if self[name].shape != other[name].shape:
                raise ContractError(
                    f"{what} are not congruent: {name!r} has shape {self[name].shape} vs {other[name].shape}"
                )

    def copy(self) -> ParameterSet:
        return ParameterSet((name, Tensor(t.data)) for name, t in self._entries.items())

    def assign(self, other: ParameterSet) -> None:
        """Overwrite values in place with ``other``'s (bitwise copy)."""
        self.check_congruent(other)
        for name, t in self._entries.items():
            t.data = other[name].data.copy()
            t.grad = None

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._entries.values()])

    def equals(self, other: ParameterSet) -> bool:
        """Bitwise equality of names, shapes and values."""
        if not self.is_congruent(other):
            return False
        return all(
            self[n].data.tobytes() == other[n].data.tobytes() for n in self._entries
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{list(t.shape)}" for n, t in self._entries.items())
        return f"ParameterSet({inner})"


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(
                f"learning_rate must be > 0, got {self.learning_rate}", field="learning_rate"
            )


def sgd_step(params: ParameterSet, config: SgdConfig) -> None:
    """In-place ``p <- p - lr * grad`` for every entry, then clear the grads."""
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"sgd_step: parameter {name!r} has no gradient")
    lr = config.learning_rate
    for t in params.tensors():
        t.data = t.data - lr * t.grad
        t.grad = None


def dumps(params: ParameterSet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> ParameterSet:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ParseError(f"truncated checkpoint while reading {what}", pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise ParseError("not a parameter checkpoint (bad magic)", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    out = ParameterSet()
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("entry name is not valid UTF-8", start + 4) from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dimensions"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * n, f"data of {name!r}"), dtype="<f8")
        if name in out:
            raise ParseError(f"duplicate entry {name!r}", start)
        out.add(name, Tensor(data.reshape(dims).astype(np.float64)))
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} trailing bytes after last entry", pos)
    return out


def save(params: ParameterSet, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path: str | os.PathLike) -> ParameterSet:
    with open(path, "rb") as fh:
        return loads(fh.read())
