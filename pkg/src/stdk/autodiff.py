"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the interpolation MLP and the ConvLSTM need are
provided. A graph is recorded while gradients are enabled and released by
:func:`backward`; a graph is never reused across two backward calls.
"""
from __future__ import annotations

import contextlib
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InvalidArgumentError, MissingInputError, NumericError, ShapeError

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable tensor carrying Adam moment estimates."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(x) -> Tensor:
    """``ln(1 + e^x)``; returns ``x`` itself beyond 30 where the difference underflows."""
    x = as_tensor(x)
    z = x.data
    big = z > 30.0
    out = np.where(big, z, np.log1p(np.exp(np.where(big, 0.0, z))))
    return _make(out, (x,), lambda g: (g * _sigmoid(z),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), backward)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(data, (x,), lambda g: (g.reshape(old),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def _same_pad(k):
    return (k - 1) // 2, k // 2


def conv2d(x, w, b=None) -> Tensor:
    """Cross-correlation with 'same' zero padding.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, kh, kw]``; optional bias ``b`` has shape ``[C_out]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or w.ndim != 4 or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {w.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    o, _, kh, kw = w.shape
    (pt, pb), (pl, pr) = _same_pad(kh), _same_pad(kw)
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, c, h, w, kh, kw
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, h * wd)
    w2 = w.data.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, o, h, wd)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]

    def backward(g):
        g = g if batched else g[None]
        g2 = g.reshape(n, o, h * wd)
        gw = np.einsum("nop,nkp->ok", g2, cols).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, h, wd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + h, j : j + wd] += gcols[:, :, i, j]
        gx = gxp[:, :, pt : pt + h, pl : pl + wd]
        gx = gx if batched else gx[0]
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out if batched else out[0], parents, backward)


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor, params=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Parameters listed in ``params`` that the loss does not depend on get a
    zero gradient. The recorded graph is released afterwards.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._parents = ()
        node._backward = None


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    if not lr > 0:
        raise InvalidArgumentError(f"learning rate must be positive, got {lr}")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = np.zeros_like(p.data)


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    nan_blocks: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.nan_blocks and self.max_error < self.tolerance

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        lines += [f"{name}: NaN gradient" for name in self.nan_blocks]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} (max {self.max_error:.3e}, tol {self.tolerance:g})")
        return "\n".join(lines)


def _scalarize(out) -> Tensor:
    if isinstance(out, (tuple, list)):
        total = None
        for o in out:
            s = tsum(o)
            total = s if total is None else total + s
        return total
    return tsum(out)


def grad_check(model, inputs, tolerance=1e-4, loss_fn=None, h=1e-5, max_per_block=None, seed=0) -> GradCheckReport:
    """Compare backprop gradients to central differences, block by block.

    ``model(*inputs)`` is reduced to a scalar by ``loss_fn`` (default: sum
    of every output). A block's error is ``max|a - n| / max(max|a|, max|n|)``
    over the checked coordinates, which stays meaningful when individual
    entries are near zero. ``max_per_block`` samples coordinates for large
    blocks.
    """
    if not isinstance(inputs, (tuple, list)):
        inputs = (inputs,)
    loss_fn = loss_fn or _scalarize
    params = model.parameters()
    for p in params.values():
        if not np.all(np.isfinite(p.data)):
            raise NumericError("grad_check: non-finite parameter values")
        p.grad = np.zeros_like(p.data)
    backward(loss_fn(model(*inputs)), params.values())

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        analytic = p.grad.copy()
        if np.any(np.isnan(analytic)):
            report.nan_blocks.append(name)
            continue
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_block is not None and flat.size > max_per_block:
            idx = rng.choice(flat.size, size=max_per_block, replace=False)
        numeric = np.empty(len(idx))
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn(model(*inputs)).item()
                flat[i] = orig - h
                down = loss_fn(model(*inputs)).item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
        if np.any(np.isnan(numeric)):
            report.nan_blocks.append(name)
            continue
        a = analytic.reshape(-1)[idx]
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0))
        diff = np.max(np.abs(a - numeric), initial=0.0)
        report.errors[name] = 0.0 if scale == 0 else float(diff / scale)
        p.grad = np.zeros_like(p.data)
    return report


CHECKPOINT_MAGIC = b"STDK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write named float64 blocks plus a ``key=value`` metadata header."""
    meta_text = "".join(f"{k}={meta[k]}\n" for k in sorted(meta or {})).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_text)), meta_text]
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        meta_text = buf[pos : pos + meta_len].decode("utf-8")
        pos += meta_len
        meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
        (n_blocks,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise FormatError(f"{path}: truncated block {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint") from None
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return params, meta
