"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record a node on the active :class:`Graph` (if any); outside a
graph they only compute, which keeps inference cheap.  Non-differentiable
forwards (``heaviside``, ``sign_ste``) carry registered pseudo-gradients.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


def _active_graph() -> "Graph | None":
    return getattr(_local, "graph", None)


def _relaxed() -> bool:
    return getattr(_local, "relaxed", False)


class Tensor:
    """Array value plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "node_id", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar; comparisons are intentionally not overloaded
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Ordered record of computation nodes; creation order is topological.

    Use as a context manager so that ops executed inside are recorded::

        with Graph() as g:
            loss = ...
        grads = backward(g, loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        self._prev = _active_graph()
        _local.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _local.graph = self._prev

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _active_graph()
    _local.graph = None
    try:
        yield
    finally:
        _local.graph = prev


@contextlib.contextmanager
def relaxed_spikes() -> Iterator[None]:
    """Replace the Heaviside forward with the smooth primitive of its surrogate.

    Under this context the spiking network is an ordinary differentiable
    function, so finite differences can check the surrogate backward path.
    """
    prev = _relaxed()
    _local.relaxed = True
    try:
        yield
    finally:
        _local.relaxed = prev


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    g = _active_graph()
    if g is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        g.nodes.append(out)
    return out


def custom_op(out_data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Record a user-defined op; ``backward(g)`` returns one grad per parent."""
    return _record(np.asarray(out_data, dtype=DTYPE), parents, backward, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    return _record(x.data * s, (x,), lambda g: (g * s,), "scale")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))
    return _record(np.stack([x.data for x in xs], axis=axis), xs, bw, "stack")


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    return [take(x, np.array([i]), axis, squeeze=True) for i in range(x.shape[axis])]


def take(x: Tensor, idx, axis: int, squeeze: bool = False) -> Tensor:
    """Gather ``idx`` along ``axis``; ``squeeze`` drops the axis for a single index."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)
    if squeeze:
        out = np.squeeze(out, axis=axis)
    src = x.shape

    def bw(g):
        if squeeze:
            g = np.expand_dims(g, axis)
        full = np.zeros(src, dtype=DTYPE)
        sl = [slice(None)] * len(src)
        if len(np.unique(idx)) == len(idx):
            sl[axis] = idx
            full[tuple(sl)] = g
        else:
            np.add.at(full, tuple(sl[:axis]) + (idx,), g)
        return (full,)
    return _record(out, (x,), bw, "take")


# ---------------------------------------------------------------- reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)
    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([src[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src) / n,)
    return _record(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw, "mean")


def l1norm(x: Tensor, axis=None) -> Tensor:
    """Sum of absolute values; subgradient 0 at 0."""
    src = x.shape
    sgn = np.sign(x.data)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src) * sgn,)
    return _record(np.sum(np.abs(x.data), axis=axis), (x,), bw, "l1norm")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _record(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw, "linear")


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, ho, wo, c, k, k) -> rows per output pixel
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=DTYPE)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution (cross-correlation) via im2col; ``w`` is (C_out, C_in, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, _, h, wd_ = x.shape
    cout, _, k, _ = w.shape
    if conv_output_size(h, k, stride, padding) < 1 or conv_output_size(wd_, k, stride, padding) < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    xshape, wshape = x.shape, w.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(wshape)
        gx = _col2im(g2 @ wmat, xshape, k, stride, padding, ho, wo)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return _record(np.ascontiguousarray(out), parents, bw, "conv2d")


def batchnorm_static(x: Tensor, mean_: np.ndarray, var: np.ndarray, eps: float = 1e-5, axis: int = 1) -> Tensor:
    """Normalise with frozen per-channel statistics (no learnable affine)."""
    shape = [1] * x.data.ndim
    shape[axis] = -1
    inv = 1.0 / np.sqrt(np.asarray(var, dtype=DTYPE) + eps)
    inv_b = inv.reshape(shape)
    out = (x.data - np.asarray(mean_, dtype=DTYPE).reshape(shape)) * inv_b
    return _record(out, (x,), lambda g: (g * inv_b,), "batchnorm")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch for integer ``labels``."""
    if logits.data.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {np.shape(labels)}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)
    return _record(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- spikes and signs

@dataclass(frozen=True)
class SurrogateConfig:
    """Pseudo-derivative for the Heaviside step: ``a / (1 + (pi*a*x)^2)``."""

    kind: str = "atan"
    width: float = 1.0

    def __post_init__(self):
        if self.kind != "atan":
            raise ValueError(f"unsupported surrogate kind {self.kind!r}")
        if not self.width > 0:
            raise ValueError("surrogate width must be positive")

    def grad(self, x: np.ndarray) -> np.ndarray:
        a = self.width
        return a / (1.0 + (math.pi * a * x) ** 2)

    def primitive(self, x: np.ndarray) -> np.ndarray:
        # antiderivative of grad(), shifted to range (0, 1)
        return 0.5 + np.arctan(math.pi * self.width * x) / math.pi


DEFAULT_SURROGATE = SurrogateConfig()


def heaviside_surrogate_grad(x, cfg: SurrogateConfig = DEFAULT_SURROGATE) -> Tensor:
    return Tensor(cfg.grad(as_tensor(x).data))


def heaviside(x: Tensor, threshold: float = 0.0, cfg: SurrogateConfig = DEFAULT_SURROGATE) -> Tensor:
    """Step ``x >= threshold``; backward uses the surrogate of ``cfg``."""
    u = x.data - threshold
    out = cfg.primitive(u) if _relaxed() else (u >= 0).astype(DTYPE)
    return _record(out, (x,), lambda g: (g * cfg.grad(u),), "heaviside")


def sign_ste(x: Tensor) -> Tensor:
    """+1 where x >= 0 else -1; gradient passes where |x| <= 1."""
    xd = x.data
    inside = np.abs(xd) <= 1.0
    return _record(np.where(xd >= 0, 1.0, -1.0), (x,), lambda g: (g * inside,), "sign")


# ---------------------------------------------------------------- dispatch + backward

_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "linear": linear,
    "mean": mean,
    "l1norm": l1norm,
    "batchnorm": batchnorm_static,
    "cross_entropy": cross_entropy,
    "heaviside": heaviside,
    "sign": sign_ste,
    "scale": scale,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch by op name, e.g. ``forward_op("conv2d", x, w, stride=2)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over ``graph``; returns ``{node_id: grad}``.

    Leaves with ``requires_grad`` also get their ``.grad`` accumulated.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pid = parent.node_id
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
            if parent._backward is None:
                leaves[pid] = parent
    if loss._backward is None and loss.requires_grad:
        leaves[loss.node_id] = loss
    for pid, leaf in leaves.items():
        g = grads[pid]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return {pid: grads[pid] for pid in leaves}
