"""Dense networks with exact reverse-mode gradients and the Adam optimizer.

:class:`Tensor` wraps a float64 array and records, for every operation that
produced it, its parents and a closure mapping the output gradient to parent
gradients. :func:`backward` walks that record in reverse topological order.
Only the operations defined here are recorded; handing a Tensor to a raw numpy
function raises :class:`UnrecordedOperationError` instead of silently
dropping the gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class UnrecordedOperationError(TypeError):
    pass


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "grad_fn", "requires_grad")

    # Make numpy defer to our reflected operators instead of coercing.
    __array_ufunc__ = None

    def __init__(self, data, parents: tuple["Tensor", ...] = (), grad_fn: Callable | None = None, requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.grad_fn = grad_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @classmethod
    def leaf(cls, data) -> "Tensor":
        return cls(np.array(data, dtype=np.float64), requires_grad=True)

    def __array__(self, dtype=None, copy=None):
        raise UnrecordedOperationError("Tensor passed to an unrecorded numpy operation; use raypath.neural ops")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _make(data, parents, grad_fn) -> Tensor:
    out = Tensor(data, parents)
    if out.requires_grad:
        out.grad_fn = grad_fn
    else:
        out.parents = ()
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------------ recorded ops


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = _t(a)
    return _make(a.data**2, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = _t(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def tanh(a) -> Tensor:
    a = _t(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _t(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a, eps: float = 0.0) -> Tensor:
    a = _t(a)
    shifted = a.data + eps
    return _make(np.log(shifted), (a,), lambda g: (g / shifted,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where the clip is active."""
    a = _t(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = _t(a)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), grad_fn)


def mean(a, axis=None) -> Tensor:
    a = _t(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def matmul_t(x, w) -> Tensor:
    """``x @ w.T`` for ``x`` of shape (..., in) and ``w`` of shape (out, in)."""
    x, w = _t(x), _t(w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {w.shape}")

    def grad_fn(g):
        gx = g @ w.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw

    return _make(x.data @ w.data.T, (x, w), grad_fn)


def dense(x, w, b) -> Tensor:
    return add(matmul_t(x, w), b)


def getitem(a, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = _t(a)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), grad_fn)


def take_rows(a, rows) -> Tensor:
    return getitem(a, np.asarray(rows, dtype=np.intp))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        tuple(ts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def activate(x, name: str) -> Tensor:
    if name == "relu":
        return relu(x)
    if name == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {name!r}")


# --------------------------------------------------------------------- backward


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to each leaf in ``params``.

    Leaves the loss does not depend on get a zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise UnrecordedOperationError("loss was not produced by recorded operations")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.grad_fn is not None else grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in params.items()}


# --------------------------------------------------------------- layers and MLPs


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w, b = _shape_of(self.weight), _shape_of(self.bias)
        if len(w) != 2 or b != (w[0],):
            raise ShapeError(f"weight {w} and bias {b} do not form a dense layer")


def _shape_of(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, (Tensor, np.ndarray)) else np.shape(x)


@dataclass
class Mlp:
    layers: list[DenseLayer]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if _shape_of(a.weight)[0] != _shape_of(b.weight)[1]:
                raise ShapeError("consecutive layer shapes do not chain")

    @classmethod
    def from_params(cls, params: Mapping, prefix: str, activation: str = "relu") -> "Mlp":
        layers = []
        i = 0
        while f"{prefix}.{i}.weight" in params:
            layers.append(DenseLayer(params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"]))
            i += 1
        return cls(layers, activation)

    @property
    def in_features(self) -> int:
        return _shape_of(self.layers[0].weight)[1]


def mlp_apply(m: Mlp, x) -> Tensor:
    """Affine layers with the activation between them, none after the last."""
    h = x
    last = len(m.layers) - 1
    for i, layer in enumerate(m.layers):
        h = dense(h, layer.weight, layer.bias)
        if i < last:
            h = activate(h, m.activation)
    return h


def mlp_forward(m: Mlp, x) -> np.ndarray:
    if _shape_of(x)[-1] != m.in_features:
        raise ShapeError(f"input width {_shape_of(x)[-1]} != {m.in_features}")
    return mlp_apply(m, x).data


def mlp_specs(prefix: str, sizes: Sequence[int], activation: str) -> list["ParamSpec"]:
    """Parameter specs for an MLP with layer widths ``sizes`` (input first)."""
    init = "he" if activation == "relu" else "glorot"
    specs = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        specs.append(ParamSpec(f"{prefix}.{i}.weight", (fan_out, fan_in), init))
        specs.append(ParamSpec(f"{prefix}.{i}.bias", (fan_out,), "zeros"))
    return specs


# -------------------------------------------------------------------- init


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str = "he"  # he | glorot | zeros


def init_params(specs: Sequence[ParamSpec], seed) -> dict[str, np.ndarray]:
    """He-uniform or Glorot-uniform weights, zero biases, drawn in spec order."""
    rng = np.random.default_rng(seed)
    params = {}
    for spec in specs:
        if spec.init == "zeros":
            params[spec.name] = np.zeros(spec.shape)
            continue
        fan_out, fan_in = spec.shape[0], int(np.prod(spec.shape[1:]))
        if spec.init == "he":
            limit = math.sqrt(6.0 / fan_in)
        elif spec.init == "glorot":
            limit = math.sqrt(6.0 / (fan_in + fan_out))
        else:
            raise ValueError(f"unknown init {spec.init!r}")
        params[spec.name] = rng.uniform(-limit, limit, size=spec.shape)
    return params


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], lr: float = 3e-5, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdamState":
        return cls(
            lr=d["lr"],
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            step=d["step"],
            m={k: np.array(v, dtype=np.float64) for k, v in d["m"].items()},
            v={k: np.array(v, dtype=np.float64) for k, v in d["v"].items()},
        )


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    """One bias-corrected Adam update.

    Returns ``(new_params, state)``; ``state`` is updated in place. A
    non-finite gradient raises before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state
