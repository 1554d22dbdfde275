"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only what the bandit networks need: elementwise arithmetic with numpy
broadcasting, a weight-matrix product, ReLU/exp/log, reductions, concat,
slicing, a stable logsumexp, small MLPs and Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class Tensor:
    """A node of the differentiation graph.

    ``data`` is always a float64 ndarray. Non-leaf tensors keep references to
    their parents and a closure mapping the output gradient to one gradient per
    parent (``None`` where a parent needs none).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable | None = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # derivative at exactly 0 is 0
    out = np.maximum(a.data, 0.0)
    return _node(out, (a,), lambda g: (np.multiply(g, out > 0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _node(out, (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# structural


def matmul(x, w) -> Tensor:
    """``x @ w`` where ``w`` is a matrix and ``x`` has any number of leading dims."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        return gx, gw

    return _node(xd @ wd, (x, w), backward)


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for a single dense layer."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, wd.shape[0]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(xd @ wd + b.data, (x, w, b), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), backward)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in idx)

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Max-shifted ``log(sum(exp(a)))`` along ``axis``."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ContractError("logsumexp over an empty axis")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Differentiate a scalar ``loss``.

    Every reachable leaf with ``requires_grad`` gets ``.grad`` set. When
    ``params`` is given, their gradients are returned in order, with zeros for
    parameters the loss does not depend on.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            del grads[id(node)]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return []
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(p.shape))
    return out


# ---------------------------------------------------------------------------
# MLPs


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected ReLU network; ``output_link`` is ``identity`` or ``exp``."""

    layer_widths: tuple[int, ...]
    output_link: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ContractError(f"layer widths must be >= 1 and at least two: {self.layer_widths}")
        if self.output_link not in ("identity", "exp"):
            raise ContractError(f"unknown output link {self.output_link!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]


def init_params(spec: MlpSpec, rng: np.random.Generator) -> list[Tensor]:
    """Weights ~ N(0, 1/fan_in), zero biases; returned as [W0, b0, W1, b1, ...]."""
    params = []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        params.append(parameter(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)))
        params.append(parameter(np.zeros(fan_out)))
    return params


def forward(spec: MlpSpec, params: Sequence[Tensor], x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] != spec.in_dim:
        raise ShapeError(f"network expects last dim {spec.in_dim}, got input {x.shape}")
    n_layers = len(spec.layer_widths) - 1
    if len(params) != 2 * n_layers:
        raise ShapeError(f"expected {2 * n_layers} parameter tensors, got {len(params)}")
    h = x
    for i in range(n_layers):
        h = linear(h, params[2 * i], params[2 * i + 1])
        if i < n_layers - 1:
            h = relu(h)
    if spec.output_link == "exp":
        h = exp(h)
    if not np.isfinite(h.data).all():
        raise NumericError("network output is not finite")
    return h


class Mlp:
    """An :class:`MlpSpec` bundled with its parameters."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        self.params = init_params(spec, rng)

    def __call__(self, x) -> Tensor:
        return forward(self.spec, self.params, x)

    def parameters(self) -> list[Tensor]:
        return list(self.params)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.first_moment):
        if np.shape(g) != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {np.shape(g)} does not match parameter {p.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1**t)
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= step_size * m / (np.sqrt(v / bc2) + state.epsilon)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)

    def minimize(self, loss: Tensor) -> None:
        self.step(backward(loss, self.params))
