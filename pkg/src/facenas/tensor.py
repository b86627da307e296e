"""Small dense-array autodiff engine.

Storage is a float64 numpy array; every differentiable operation records a
closure that pushes the output gradient back to its parents.  Only the
operators needed by the child networks and the controllers are provided.
"""
from __future__ import annotations

import contextlib
import contextvars
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


class DimensionError(ValueError):
    pass


class AxisError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def _raise_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), "reciprocal", lambda g: _accum(a, -g * out * out))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: _accum(a, 2.0 * g * a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: _accum(a, g * 0.5 / out))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: _accum(a, g * mask))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: _accum(a, g * (1.0 - out * out)))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), "sigmoid", lambda g: _accum(a, g * out * (1.0 - out)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: _accum(a, g * out))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: _accum(a, g / a.data))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "min")
    pick_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~pick_a, b.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), "min", bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: _accum(a, g * inside))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout in training mode needs a generator")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), "dropout", lambda g: _accum(a, g * keep))


# ---------------------------------------------------------------- reductions / shape

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if isinstance(axis, int):
        _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def max_(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first arg-max."""
    axis = _norm_axis(axis, a.ndim)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        _accum(a, full)

    return _make(out, (a,), "max", bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: _accum(a, g.transpose(inv)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    axis = _norm_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def index(a: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices)."""
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accum(a, full)

    return _make(np.array(out, copy=True), (a,), "index", bw)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """np.take along ``axis``; repeated indices accumulate in the backward pass."""
    axis = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise DimensionError(f"gather: index out of range for axis of size {a.shape[axis]}")
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        _accum(a, full)

    return _make(out, (a,), "gather", bw)


def embedding(weight: Tensor, ids) -> Tensor:
    return gather(weight, ids, axis=0)


def scatter_sum(src: Tensor, index_, size: int, axis: int = 0) -> Tensor:
    """Sum slices of ``src`` along ``axis`` into ``size`` buckets given by ``index_``."""
    axis = _norm_axis(axis, src.ndim)
    idx = np.asarray(index_, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != src.shape[axis]:
        raise DimensionError(f"scatter_sum: index of shape {idx.shape} does not match axis size {src.shape[axis]}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise DimensionError(f"scatter_sum: bucket index outside [0, {size})")
    shape = list(src.shape)
    shape[axis] = size
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(src.data, axis, 0))
    return _make(out, (src,), "scatter_sum", lambda g: _accum(src, np.take(g, idx, axis=axis)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.shape) if ga.shape != a.shape else ga)
        if b.requires_grad:
            if b.ndim == 1:
                gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            elif b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, gb)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), "log_softmax", bw)


# ---------------------------------------------------------------- 1-D conv / pooling

def conv_out_length(length: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """x: (B, C_in, L), weight: (C_out, C_in, k) -> (B, C_out, L_out)."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} and weight {weight.shape} are incompatible")
    B, _, L = x.shape
    _, _, k = weight.shape
    L_out = conv_out_length(L, k, stride, dilation, padding)
    if L_out < 1:
        raise DimensionError(f"conv1d: input length {L} too short for kernel {k} (dilation {dilation})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    span = stride * (L_out - 1) + 1
    slices = [xp[:, :, j * dilation: j * dilation + span: stride] for j in range(k)]
    out = np.zeros((B, weight.shape[0], L_out))
    for j, xs in enumerate(slices):
        out += np.einsum("oc,bcl->bol", weight.data[:, :, j], xs, optimize=True)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        out += bias.data[None, :, None]

    def bw(g):
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for j, xs in enumerate(slices):
                gw[:, :, j] = np.einsum("bol,bcl->oc", g, xs, optimize=True)
            _accum(weight, gw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation: j * dilation + span: stride] += np.einsum(
                    "oc,bol->bcl", weight.data[:, :, j], g, optimize=True)
            _accum(x, gxp[:, :, padding: padding + L] if padding else gxp)

    return _make(out, parents, "conv1d", bw)


def _pool_windows(x: np.ndarray, kernel: int, stride: int, padding: int, fill: float):
    L = x.shape[-1]
    L_out = conv_out_length(L, kernel, stride, 1, padding)
    if L_out < 1:
        raise DimensionError(f"pool: input length {L} too short for kernel {kernel}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)), constant_values=fill) if padding else x
    span = stride * (L_out - 1) + 1
    win = np.stack([xp[:, :, j: j + span: stride] for j in range(kernel)], axis=-1)
    return xp, win, L_out, span


def avg_pool1d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded average pooling (padding counts toward the divisor)."""
    xp, win, L_out, span = _pool_windows(x.data, kernel, stride, padding, 0.0)
    out = win.mean(axis=-1)
    L = x.shape[-1]

    def bw(g):
        gxp = np.zeros_like(xp)
        for j in range(kernel):
            gxp[:, :, j: j + span: stride] += g / kernel
        _accum(x, gxp[:, :, padding: padding + L])

    return _make(out, (x,), "mean_pool", bw)


def max_pool1d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    xp, win, L_out, span = _pool_windows(x.data, kernel, stride, padding, -np.inf)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    L = x.shape[-1]

    def bw(g):
        gxp = np.zeros_like(xp)
        pos = arg * 1 + np.arange(L_out) * stride
        b_idx, c_idx, _ = np.indices(arg.shape)
        np.add.at(gxp, (b_idx, c_idx, pos), g)
        _accum(x, gxp[:, :, padding: padding + L])

    return _make(out, (x,), "max_pool", bw)


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor):
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction and optional L2 weight decay added to the gradient."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, allow_missing: bool = False):
        b1, b2 = self.betas
        for p in self.params:
            if p.grad is None and not allow_missing:
                raise ContractError(f"parameter {p.name or p.shape} has no gradient")
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


def adam_step(params: Sequence[Tensor], optimizer: Adam):
    optimizer.step()


# ---------------------------------------------------------------- randomness

def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator keyed by (seed, *keys); independent streams per key tuple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(keys))))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(keys)).generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------- gradient check

def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn().data.sum()
            flat[i] = old - h
            down = fn().data.sum()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    for t in inputs:
        t.grad = None
    out = fn()
    loss = out if out.size == 1 else sum_(out)
    backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, h)))
    return worst


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FNASCKPT"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray | Tensor]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos: pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out
