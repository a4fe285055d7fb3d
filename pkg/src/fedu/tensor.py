"""Dense float64 tensors with a per-computation reverse-mode tape.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result remembers its parents and a closure that maps the output gradient to
input gradients; :meth:`Tensor.backward` walks that graph in reverse
topological order. The tape is rebuilt on every forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from fedu.errors import ContractError, DegenerateInputError, DimensionError

NORM_EPS = 1e-12

_BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: _BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        """Same values, no gradient path (stop-gradient)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every tensor upstream of this scalar that requires one.

        Gradients are added to any existing ``grad`` buffer, so a tensor used
        several times (or across several backward calls) accumulates.
        """
        if self.shape != ():
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor with no recorded computation")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; MLP graphs are shallow but recursion limits are not worth the risk
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: _BackwardFn) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _result(a_data @ b_data, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum. ``b`` may be a plain number, treated as a constant."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data - c, (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _result(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-H bias to every row of a B x H matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias_add: cannot add bias {b.shape} to {x.shape}")
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = axis % x.data.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every row of a B x D matrix to unit L2 norm."""
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize expects a 2-D batch, got shape {x.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        row = int(bad[0])
        raise DegenerateInputError(f"l2_normalize: row {row} has norm {norms[row]:.3e}", row=row)
    inv = (1.0 / norms)[:, None]
    y = x.data * inv

    def backward(g):
        proj = np.einsum("ij,ij->i", g, y)[:, None]
        return ((g - y * proj) * inv,)

    return _result(y, (x,), backward)


def contrastive_loss(y: Tensor, y_target: Tensor) -> Tensor:
    """Mean over rows of ``2 - 2 cos(y_b, y_target_b)``.

    ``y_target`` is always detached here, so nothing upstream of it receives
    a gradient regardless of how the caller built it.
    """
    _same_shape("contrastive_loss", y, y_target)
    if y.data.ndim != 2:
        raise DimensionError(f"contrastive_loss expects 2-D batches, got {y.shape}")
    online = l2_normalize(y)
    target = l2_normalize(y_target.detach())
    cos = sum(mul(online, target), axis=1)
    return add(scale(mean(cos), -2.0), 2.0)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` under B x C ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss), (logits,), backward)
