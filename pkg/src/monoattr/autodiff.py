"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor`; when any input requires grad the
result keeps references to its parents and a closure that pushes the
upstream gradient back.  ``backward`` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


class UnsupportedOpError(TypeError):
    pass


# op kinds covered by the finite-difference gradient check
REGISTERED_OPS = (
    "matmul", "add", "mul", "relu", "softmax", "layernorm", "gather", "sum",
    "mean", "exp", "log", "sqrt", "power", "sub", "div", "neg", "abs",
    "reshape", "transpose", "take", "getitem", "concat", "log_softmax",
    "conv1d", "tanh",
)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor's reflected operator

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- bookkeeping ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, retain_graph: bool = False) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {self.shape}")
        _backprop(self, np.ones_like(self.data), retain_graph=retain_graph)

    # -- operators -------------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (intermediates are freed eagerly)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _make(op: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    # a single non-finite entry makes the sum non-finite; confirm before raising
    if not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite output")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- tape --------------------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered record of the nodes feeding one output."""

    nodes: list[Tensor] = field(default_factory=list)
    seed: int | None = None

    @classmethod
    def record(cls, output: Tensor, seed: int | None = None) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order, seed)


def _backprop(output: Tensor, seed_grad: np.ndarray, retain_graph: bool = False) -> None:
    if not output.requires_grad:
        raise ContractError("output is not on the tape (no input requires grad)")
    tape = Tape.record(output)
    grads: dict[int, np.ndarray] = {id(output): seed_grad}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            raise ContractError("graph already freed; pass retain_graph=True to backprop twice")
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        for node in tape.nodes:
            if node._parents:
                node._backward = None


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc
    return _make("add", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc
    return _make("sub", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc
    return _make("mul", data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: {a.shape} vs {b.shape}") from exc

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", data, (a, b), back)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data ** p
    return _make("power", data, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make("exp", data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _make("sqrt", data, (a,), lambda g: (g * 0.5 / data,))


def tanh(a) -> Tensor:
    a = _lift(a)
    data = np.tanh(a.data)
    return _make("tanh", data, (a,), lambda g: (g * (1.0 - data * data),))


def abs_(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = _lift(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is 0."""
    a = _lift(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def heaviside_ste(a, eps: float = 1e-2) -> Tensor:
    """H(a) with H(0) = 0, backpropagated through a rectangle of width ``eps``.

    The pseudo-derivative is 1/eps on |a| < eps/2 and 0 elsewhere.
    """
    a = _lift(a)
    data = (a.data > 0).astype(np.float64)
    window = (np.abs(a.data) < eps / 2) / eps
    return _make("heaviside_ste", data, (a,), lambda g: (g * window,))


# -- reductions and shape ----------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(data), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(np.asarray(data).size, 1) if a.data.size else 1

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", np.asarray(data), (a,), back)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {a.shape} -> {shape}") from exc
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(_lift(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    data = a.data[idx]

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", np.array(data), (a,), back)


def take(a, indices, axis: int = 0) -> Tensor:
    a = _lift(a)
    indices = np.asarray(indices, dtype=np.int64)
    try:
        data = np.take(a.data, indices, axis=axis)
    except IndexError as exc:
        raise DimensionError(f"take: index out of range for shape {a.shape}") from exc

    def back(g):
        out = np.zeros_like(a.data)
        ax = axis % a.ndim
        moved = np.moveaxis(out, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (out,)

    return _make("take", data, (a,), back)


def gather(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding gather)."""
    return _rename(take(table, ids, axis=0), "gather")


def _rename(t: Tensor, op: str) -> Tensor:
    t.op = op
    return t


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", data, tuple(ts), back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


# -- linear algebra and normalisation ----------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul: scalar operand")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}") from exc

    def back(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = np.matmul(g[..., None, :], np.swapaxes(bd, -1, -2))[..., 0, :]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bd.ndim == 1:
            ga = g[..., :, None] * bd
            gb = np.matmul(np.swapaxes(ad, -1, -2), g[..., :, None])[..., 0]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", data, (a, b), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    s = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def back(g):
        gs = g * s
        gs -= s * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return _make("softmax", s, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    a = _lift(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layernorm", xhat, (a,), back)


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, C_in, L) with ``w`` (C_out, C_in, k)."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} vs weight {w.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    length = (xp.shape[2] - k) // stride + 1
    if length < 1:
        raise DimensionError(f"conv1d: kernel {k} longer than padded input {xp.shape[2]}")
    idx = np.arange(length)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, :, idx]  # B, C_in, L_out, k
    data = np.einsum("bclk,ock->bol", cols, w.data, optimize=True)

    def back(g):
        gw = np.einsum("bol,bclk->ock", g, cols, optimize=True)
        gcols = np.einsum("bol,ock->bclk", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j: j + stride * (length - 1) + 1: stride] += gcols[:, :, :, j]
        gx = gxp[:, :, padding: padding + x.shape[2]] if padding else gxp
        return gx, gw

    return _make("conv1d", data, (x, w), back)


def apply_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op-kind name (the table used by the gradient checker)."""
    table = {
        "matmul": matmul, "add": add, "mul": mul, "sub": sub, "div": div,
        "neg": neg, "relu": relu, "softmax": softmax, "log_softmax": log_softmax,
        "layernorm": layernorm, "gather": gather, "take": take, "sum": sum_,
        "mean": mean, "exp": exp, "log": log, "sqrt": sqrt, "power": power,
        "abs": abs_, "reshape": reshape, "transpose": transpose, "getitem": getitem,
        "concat": lambda *ts, **kw: concat(ts, **kw), "conv1d": conv1d, "tanh": tanh,
    }
    if kind not in table:
        raise UnsupportedOpError(f"unknown op kind {kind!r}")
    return table[kind](*inputs, **kwargs)


# -- derivatives of whole functions --------------------------------------------


def grad(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Gradient of a scalar function at ``x``."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    y = f(xt)
    y.backward()
    return xt.grad if xt.grad is not None else np.zeros_like(xt.data)


def vjp(f: Callable[[Tensor], Tensor], x, v) -> np.ndarray:
    """Vector-Jacobian product ``v^T (df/dx)`` with one backward pass."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    y = f(xt)
    v = _as_array(v)
    if v.shape != y.shape:
        raise DimensionError(f"vjp: cotangent {v.shape} vs output {y.shape}")
    if not y.requires_grad:
        return np.zeros_like(xt.data)
    _backprop(y, v.copy())
    return xt.grad if xt.grad is not None else np.zeros_like(xt.data)


def jacobian(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Dense Jacobian of shape (f(x).size, x.size); row i is d f_i / dx."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    y = f(xt)
    rows = np.zeros((y.size, xt.size))
    if not y.requires_grad:
        return rows
    for i in range(y.size):
        xt.grad = None
        seed = np.zeros(y.size)
        seed[i] = 1.0
        _backprop(y, seed.reshape(y.shape), retain_graph=True)
        if xt.grad is not None:
            rows[i] = xt.grad.reshape(-1)
    return rows


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a numpy function (for checks)."""
    x = np.array(x, dtype=np.float64)
    y0 = np.array(f(x))  # copies: f may return a view of x
    out = np.zeros((y0.size, x.size))
    flat = x.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        yp = np.array(f(x)).reshape(-1)
        flat[j] = old - h
        ym = np.array(f(x)).reshape(-1)
        flat[j] = old
        out[:, j] = (yp - ym) / (2 * h)
    return out


# -- serialisation ------------------------------------------------------------

_MAGIC = b"MATT"


def save_arrays(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a JSON header plus one flat little-endian f64 blob.

    Layout: magic, u64 header length, UTF-8 JSON header, raw float64 data.
    The header lists each array's name, shape and offset (in elements).
    """
    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    full = dict(header)
    full["arrays"] = entries
    head = json.dumps(full, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    blob = np.frombuffer(raw[12 + n:], dtype="<f8")
    arrays = {}
    for e in header.pop("arrays"):
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = blob[e["offset"]: e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return header, arrays
