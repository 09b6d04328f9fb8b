"""Float64 tensors with a recorded graph for reverse-mode differentiation.

Every differentiable operation produces a node tagged with an op name; the
backward rule for that tag lives in ``BACKWARD_RULES`` and receives the saved
context plus the upstream gradient. Keeping the rules in a table (rather than
closures) means a test can swap one out and watch the finite-difference
checker catch it.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


class SnapshotError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable dense array plus optional graph bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "ctx", "_propagated")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: dict | None = None
        self._propagated = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.op = None
        t.parents = ()
        t.ctx = None
        t._propagated = False
        return t

    # ---- metadata -------------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # ---- graph ----------------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients to every leaf that requires them.

        Leaf gradients accumulate. A second call on the same root is refused
        until ``reset_grad`` is called.
        """
        if self._propagated:
            raise RuntimeError("gradients already propagated from this node; call reset_grad() first")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs an explicit gradient for non-scalar output {self.shape}")
            grad = np.ones(self.shape, dtype=DTYPE)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = BACKWARD_RULES[node.op](node.ctx, g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        self._propagated = True

    def reset_grad(self) -> None:
        """Clear leaf gradients in this graph and re-arm ``backward``."""
        for node in _topo_order(self):
            if node.op is None:
                node.grad = None
        self._propagated = False

    # ---- operator sugar -------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], ctx: dict) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out.ctx = ctx
    if not np.all(np.isfinite(out.data)) and all(np.all(np.isfinite(p.data)) for p in parents):
        raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


BACKWARD_RULES: dict[str, Callable[[dict, np.ndarray], tuple]] = {}


def _rule(name: str):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn
    return register


# ---- elementwise --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, "add", (a, b), {"sa": a.shape, "sb": b.shape})


@_rule("add")
def _add_bw(ctx, g):
    return unbroadcast(g, ctx["sa"]), unbroadcast(g, ctx["sb"])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, "sub", (a, b), {"sa": a.shape, "sb": b.shape})


@_rule("sub")
def _sub_bw(ctx, g):
    return unbroadcast(g, ctx["sa"]), -unbroadcast(g, ctx["sb"])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, "mul", (a, b), {"a": a.data, "b": b.data})


@_rule("mul")
def _mul_bw(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * c, "scale", (x,), {"c": c})


@_rule("scale")
def _scale_bw(ctx, g):
    return (g * ctx["c"],)


def divide(x, c: float) -> Tensor:
    """Divide by a scalar constant (true division, not multiply-by-reciprocal)."""
    x = as_tensor(x)
    if c == 0:
        raise ZeroDivisionError("divide by zero")
    return _result(x.data / c, "divide", (x,), {"c": c})


@_rule("divide")
def _divide_bw(ctx, g):
    return (g / ctx["c"],)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), "relu", (x,), {"mask": mask})


@_rule("relu")
def _relu_bw(ctx, g):
    return (g * ctx["mask"],)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x) -> Tensor:
    """ln(1 + e^x), evaluated without overflow."""
    x = as_tensor(x)
    return _result(np.logaddexp(0.0, x.data), "softplus", (x,), {"x": x.data})


@_rule("softplus")
def _softplus_bw(ctx, g):
    return (g * _sigmoid(ctx["x"]),)


# ---- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc
    return _result(out, "matmul", (a, b), {"a": a.data, "b": b.data})


@_rule("matmul")
def _matmul_bw(ctx, g):
    a, b = ctx["a"], ctx["b"]
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs at least one column, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, "softmax", (x,), {"y": y})


@_rule("softmax")
def _softmax_bw(ctx, g):
    y = ctx["y"]
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    return _result(y, "layer_norm", (x,), {"y": y, "inv": inv})


@_rule("layer_norm")
def _layer_norm_bw(ctx, g):
    y, inv = ctx["y"], ctx["inv"]
    return (inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True)),)


# ---- shape ops ----------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _result(out, "reshape", (x,), {"shape": x.shape})


@_rule("reshape")
def _reshape_bw(ctx, g):
    return (g.reshape(ctx["shape"]),)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    return _result(np.transpose(x.data, axes), "transpose", (x,), {"axes": axes})


@_rule("transpose")
def _transpose_bw(ctx, g):
    return (np.transpose(g, np.argsort(ctx["axes"])),)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    return _result(x.data[idx], "getitem", (x,), {"idx": idx, "shape": x.shape})


@_rule("getitem")
def _getitem_bw(ctx, g):
    out = np.zeros(ctx["shape"], dtype=DTYPE)
    np.add.at(out, ctx["idx"], g)
    return (out,)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    return _result(out, "concat", ts, {"axis": axis, "splits": np.cumsum(sizes)[:-1]})


@_rule("concat")
def _concat_bw(ctx, g):
    return tuple(np.split(g, ctx["splits"], axis=ctx["axis"]))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot stack shapes {[t.shape for t in ts]}") from exc
    return _result(out, "stack", ts, {"axis": axis, "n": len(ts)})


@_rule("stack")
def _stack_bw(ctx, g):
    return tuple(np.take(g, i, axis=ctx["axis"]) for i in range(ctx["n"]))


# ---- reductions ---------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    return _result(x.data.sum(axis=ax, keepdims=keepdims), "sum", (x,),
                   {"axis": ax, "shape": x.shape, "keepdims": keepdims})


@_rule("sum")
def _sum_bw(ctx, g):
    if not ctx["keepdims"]:
        g = np.expand_dims(g, ctx["axis"])
    return (np.broadcast_to(g, ctx["shape"]).copy(),)


def mean_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax]))
    return _result(x.data.sum(axis=ax, keepdims=keepdims) / count, "mean", (x,),
                   {"axis": ax, "shape": x.shape, "keepdims": keepdims, "count": count})


@_rule("mean")
def _mean_bw(ctx, g):
    if not ctx["keepdims"]:
        g = np.expand_dims(g, ctx["axis"])
    return (np.broadcast_to(g / ctx["count"], ctx["shape"]).copy(),)


def gap(x) -> Tensor:
    """Global average pool over the two trailing spatial axes: (..., c, h, w) -> (..., c)."""
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"gap expects (..., c, h, w), got {x.shape}")
    return mean_axis(x, axis=(-2, -1))


# ---- convolution --------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x is (n, c, h, w) or (c, h, w); w is (o, c, kh, kw); b is (o,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    ctx = {"cols": cols, "wmat": wmat, "xshape": x.shape, "wshape": w.shape,
           "stride": stride, "pad": pad, "out_hw": (ho, wo)}
    result = _result(np.ascontiguousarray(out), "conv2d", (x, w), ctx)
    if b is not None:
        result = add(result, reshape(as_tensor(b), (o, 1, 1)))
    if squeeze:
        result = reshape(result, result.shape[1:])
    return result


@_rule("conv2d")
def _conv2d_bw(ctx, g):
    n, c, h, wd = ctx["xshape"]
    o, _, kh, kw = ctx["wshape"]
    ho, wo = ctx["out_hw"]
    s, p = ctx["stride"], ctx["pad"]
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    gw = (g2.T @ ctx["cols"]).reshape(ctx["wshape"])
    gcols = (g2 @ ctx["wmat"]).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
    return gx, gw


# ---- verification -------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = parameter(base)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function")
    if out.requires_grad:
        out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    analytic = analytic.reshape(-1)
    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xm = flat.copy()
            xp[i] += eps
            xm[i] -= eps
            fp = f(Tensor._wrap(xp.reshape(base.shape))).item()
            fm = f(Tensor._wrap(xm.reshape(base.shape))).item()
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return float(worst)


# ---- snapshot files -----------------------------------------------------

MAGIC = b"CFTN"
VERSION = 1


def to_bytes(x) -> bytes:
    # asarray, not ascontiguousarray: the latter promotes 0-d arrays to rank 1
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    header = MAGIC + bytes([VERSION]) + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def from_bytes(buf: bytes, name: str = "<bytes>") -> Tensor:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise SnapshotError(f"{name}: not a tensor snapshot (bad magic)")
    if buf[4] != VERSION:
        raise SnapshotError(f"{name}: unsupported snapshot version {buf[4]}")
    (rank,) = struct.unpack_from("<I", buf, 5)
    offset = 9 + 4 * rank
    if len(buf) < offset:
        raise SnapshotError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 9)
    expected = offset + 8 * int(np.prod(dims, dtype=np.int64))
    if len(buf) != expected:
        raise SnapshotError(f"{name}: payload is {len(buf) - offset} bytes, expected {expected - offset}")
    arr = np.frombuffer(buf, dtype="<f8", offset=offset).reshape(dims).astype(DTYPE)
    return Tensor._wrap(arr)


def save_tensor(path, x) -> None:
    Path(path).write_bytes(to_bytes(x))


def load_tensor(path) -> Tensor:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise SnapshotError(f"{path}: cannot read ({exc.strerror})") from exc
    return from_bytes(buf, str(path))


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
