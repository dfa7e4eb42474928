"""Dense f64 tensors with reverse-mode automatic differentiation.

Every differentiable value is a :class:`Tensor`.  Operations build a graph
implicitly through parent links; :func:`backward` orders the reachable nodes
topologically and runs each node's local gradient rule exactly once.

Only the operations needed by MLP classifiers, MLP generators and the
distillation losses are provided.  Broadcasting is limited to a ``1 x n`` row
against an ``m x n`` matrix (bias addition); every other shape mismatch raises
:class:`~dfunlearn.errors.DimensionError`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor", "ParameterSet", "as_tensor", "constant",
    "matmul", "add", "sub", "mul", "scale", "relu", "tanh", "exp",
    "log_softmax", "softmax", "xlogx", "sum_all", "row_sum", "mean_all",
    "col_mean", "take_rows", "topo_order", "backward",
    "OptimSpec", "SGD", "Adam", "make_optimizer", "optimizer_step",
]

_BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An f64 array plus the bookkeeping needed for reverse-mode AD.

    Leaves created with ``requires_grad=True`` are trainable parameters; their
    ``grad`` accumulates across calls to :func:`backward` until reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), backward_fn: _BackwardFn | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self.grad = np.zeros_like(arr) if (requires_grad and not parents) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A non-differentiable tensor (teacher outputs, fixed targets)."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn: _BackwardFn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = True
    t.op = op
    t._parents = parents
    t._backward = fn
    t.grad = None
    return t


def _check_2d(t: Tensor, name: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {t.shape}")


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[1] and 1 in (a.shape[0], b.shape[0]):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only the bias-row case reaches here
    return g.sum(axis=0, keepdims=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul lhs")
    _check_2d(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _node(ad @ bd, "matmul", (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(ad * bd, "mul", (a, b), fn)


def scale(a: Tensor, factor: float, offset: float = 0.0,
          clip: tuple[float, float] | None = None) -> Tensor:
    """``factor * a + offset``, optionally clipped to ``clip`` in the forward pass.

    Clipping is only meant to absorb last-ulp rounding at range ends; the
    gradient ignores it.
    """
    out = a.data * factor + offset
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return _node(out, "scale", (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, "exp", (a,), lambda g: (g * y,))


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(a: Tensor) -> Tensor:
    _check_2d(a, "log_softmax input")
    if a.shape[1] < 2:
        raise DimensionError(f"log_softmax needs at least 2 columns, got {a.shape}")
    y = _log_softmax_np(a.data)
    p = np.exp(y)
    return _node(y, "log_softmax", (a,),
                 lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def softmax(a: Tensor) -> Tensor:
    _check_2d(a, "softmax input")
    p = np.exp(_log_softmax_np(a.data))
    return _node(p, "softmax", (a,),
                 lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def xlogx(a: Tensor) -> Tensor:
    """Elementwise ``x ln x`` with the continuous extension ``0 ln 0 = 0``."""
    x = a.data
    pos = x > 0
    logx = np.log(np.where(pos, x, 1.0))
    return _node(np.where(pos, x * logx, 0.0), "xlogx", (a,),
                 lambda g: (g * np.where(pos, logx + 1.0, 0.0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.array([a.data.sum()]), "sum", (a,),
                 lambda g: (np.full(shape, g[0]),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _node(np.array([a.data.sum() / n]), "mean", (a,),
                 lambda g: (np.full(shape, g[0] / n),))


def row_sum(a: Tensor) -> Tensor:
    """Sum across columns: ``m x n -> m x 1``."""
    _check_2d(a, "row_sum input")
    n = a.shape[1]
    return _node(a.data.sum(axis=1, keepdims=True), "row_sum", (a,),
                 lambda g: (np.repeat(g, n, axis=1),))


def col_mean(a: Tensor) -> Tensor:
    """Mean over the batch dimension: ``m x n -> 1 x n``."""
    _check_2d(a, "col_mean input")
    m = a.shape[0]
    return _node(a.data.mean(axis=0, keepdims=True), "col_mean", (a,),
                 lambda g: (np.repeat(g / m, m, axis=0),))


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], "take_rows", (a,), fn)


def topo_order(root: Tensor) -> list[Tensor]:
    """Differentiable nodes reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``.

    Returns the node order that was traversed (useful for inspection).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    if not order:
        return order
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return order


class ParameterSet:
    """Ordered, uniquely named trainable tensors."""

    def __init__(self, items: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def frozen(self) -> dict[str, Tensor]:
        """Constant views of the current values; gradients do not reach them."""
        return {k: Tensor(t.data) for k, t in self._params.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: t.data.copy() for k, t in self._params.items()})

    def to_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass
class OptimSpec:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


class SGD:
    """``v <- momentum * v + grad``; ``value <- value - lr * v``."""

    def __init__(self, params: ParameterSet, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        for k, t in self.params.items():
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self._velocity[k]
            v *= self.momentum
            v += g
            t.data -= self.lr * v


class Adam:
    def __init__(self, params: ParameterSet, lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, t in self.params.items():
            g = t.grad
            m, v = self._m[k], self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: ParameterSet, spec: OptimSpec) -> SGD | Adam:
    if spec.kind == "sgd":
        return SGD(params, spec.lr, spec.momentum, spec.weight_decay)
    return Adam(params, spec.lr, spec.betas, spec.eps)


def optimizer_step(params: ParameterSet, spec: OptimSpec, state: SGD | Adam | None = None) -> SGD | Adam:
    """One update of ``params`` from their current grads.

    Pass the returned optimizer back in as ``state`` to keep momentum/moments
    across calls.
    """
    opt = state if state is not None else make_optimizer(params, spec)
    opt.step()
    return opt
