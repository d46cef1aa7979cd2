"""Dense float64 tensors with tape-based reverse-mode differentiation, and Adam.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure; :meth:`Tensor.backward` walks the
recorded graph in reverse topological order. Broadcasting follows numpy's
trailing-dimension rules and gradients are summed back to operand shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "where",
    "logsumexp",
    "softmax",
    "log_softmax",
    "AdamState",
    "adam_step",
    "Adam",
    "finite_diff_grad",
]

DTYPE = np.float64


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and grad.shape[k] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _shape_error(op: str, a: tuple, b: tuple) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {a} and {b}")


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic -------------------------------------------------------
    def _binary_shape(self, other: Tensor, op: str) -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise _shape_error(op, self.shape, other.shape) from None

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        self._binary_shape(other, "add")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        self._binary_shape(other, "sub")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), backward)

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        self._binary_shape(other, "mul")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        self._binary_shape(other, "div")
        if np.any(other.data == 0):
            raise ZeroDivisionError(f"division by a tensor with zero entries (shape {other.shape})")
        a, b = self, other
        out_data = a.data / b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

        return Tensor._make(out_data, (a, b), backward)

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        p = float(exponent)

        def backward(g):
            a._accumulate(g * p * a.data ** (p - 1))

        return Tensor._make(a.data**p, (a,), backward)

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise _shape_error("matmul", self.shape, other.shape)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), backward)

    def __getitem__(self, index) -> Tensor:
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return Tensor._make(a.data[index], (a,), backward)

    # -- elementwise functions -------------------------------------------
    def exp(self) -> Tensor:
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * out))

    def log(self) -> Tensor:
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g / a.data))

    def sigmoid(self) -> Tensor:
        a = self
        out = _sigmoid(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))

    def log_sigmoid(self) -> Tensor:
        a = self
        out = -np.logaddexp(0.0, -a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * _sigmoid(-a.data)))

    def softplus(self) -> Tensor:
        a = self
        out = np.logaddexp(0.0, a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * _sigmoid(a.data)))

    def tanh(self) -> Tensor:
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))

    def leaky_relu(self, slope: float = 0.1) -> Tensor:
        a = self
        factor = np.where(a.data > 0, 1.0, slope)
        return Tensor._make(a.data * factor, (a,), lambda g: a._accumulate(g * factor))

    def square(self) -> Tensor:
        a = self
        return Tensor._make(a.data * a.data, (a,), lambda g: a._accumulate(2.0 * g * a.data))

    # -- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[k] for k in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))

    def take(self, indices: np.ndarray) -> Tensor:
        """Gather from a 1-D tensor with an integer index array of any shape."""
        if self.ndim != 1:
            raise ValueError(f"take expects a 1-D tensor, got shape {self.shape}")
        a = self
        idx = np.asarray(indices)

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._make(a.data[idx], (a,), backward)

    @property
    def T(self) -> Tensor:
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: a._accumulate(g.T))

    # -- differentiation --------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        # gradients are never updated in place, so sharing the incoming buffer is safe
        if self.grad is None:
            self.grad = np.asarray(g, dtype=DTYPE)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward was already run on this graph; rebuild the loss")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # release closures; interior nodes cannot be differentiated twice
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._make(data, tuple(ts), backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true and ``b`` elsewhere."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor._make(data, (a, b), backward)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(x.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    weights = shifted / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(g * weights)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis=axis).exp()


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place; clears the gradients."""
    for k, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{k}"
            raise ValueError(f"parameter {label} (shape {p.shape}) has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


class Adam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: dict[str, tuple[list[Tensor], float]], **hyper):
        self.groups = {
            name: (list(params), AdamState(lr=lr, **hyper)) for name, (params, lr) in groups.items() if params
        }

    @property
    def step_count(self) -> int:
        return max((s.step for _, s in self.groups.values()), default=0)

    def zero_grad(self) -> None:
        for params, _ in self.groups.values():
            for p in params:
                p.grad = None

    def step(self) -> None:
        for params, state in self.groups.values():
            adam_step(params, state)

    def subset(self, names) -> "Adam":
        """View over some groups; states are shared with this optimiser."""
        out = Adam({})
        out.groups = {k: v for k, v in self.groups.items() if k in names}
        return out

    @classmethod
    def merge(cls, *optimisers: "Adam") -> "Adam":
        out = cls({})
        for opt in optimisers:
            clash = set(out.groups) & set(opt.groups)
            if clash:
                raise ValueError(f"parameter groups {sorted(clash)} appear twice")
            out.groups.update(opt.groups)
        return out


# ---------------------------------------------------------------------------
# Test oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    grad = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = as_tensor(f(Tensor(base.copy()))).item()
        flat[k] = orig - h
        down = as_tensor(f(Tensor(base.copy()))).item()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return grad


def parameters_of(modules: Iterable) -> list[Tensor]:
    out: list[Tensor] = []
    for m in modules:
        out.extend(m.parameters())
    return out
