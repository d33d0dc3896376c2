"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays. Every differentiable op records its inputs and a
closure computing the vector-Jacobian product; :func:`backward` traces those
records into a topologically ordered :class:`Tape` and replays it in reverse.

Broadcasting is deliberately restricted: elementwise binary ops accept either
identical shapes or a scalar operand. Anything else must go through an
explicit op (:func:`add_bias`, :func:`broadcast_spatial`).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _backend

LOG_CLAMP = 1e-7
INIT_STD = 0.02

_DTYPES = {"single": np.float32, "double": np.float64}
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(RuntimeError):
    """A call violated an op's precondition (not a shape problem)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None, name: str | None = None):
        if precision is not None:
            arr = np.asarray(data, dtype=_DTYPES[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: _Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def elems(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, {self.precision}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor | None
    backward: Callable


class Tape:
    """Topologically ordered op records leading to one output tensor."""

    def __init__(self, records: list[_Record]):
        self.records = records

    def __len__(self):
        return len(self.records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[_Record] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            ctx = node._ctx
            if ctx is None:
                continue
            if expanded:
                order.append(ctx)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in ctx.inputs:
                if inp._ctx is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> None:
        pending = {id(root): seed_grad}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._ctx is None:
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True).reshape(inp.shape)
                    else:
                        inp.grad += gi
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _make(data: np.ndarray, inputs: tuple, op: str, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._ctx = _Record(op, inputs, out, backward)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast is allowed)")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=t.data.dtype).reshape(t.shape)


# ---------------------------------------------------------------- creation

def randn_init(shape: Sequence[int], seed, std: float = INIT_STD, precision: str = "single",
               requires_grad: bool = True, name: str | None = None) -> Tensor:
    """Normal(0, std) tensor, deterministic in ``seed``."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}: extents must be positive")
    if isinstance(seed, np.random.Generator):
        rng = seed
    elif isinstance(seed, (list, tuple)):
        rng = np.random.default_rng([int(s) % 2**64 for s in seed])
    else:
        rng = np.random.default_rng(int(seed) % 2**64)
    data = rng.normal(0.0, std, size=shape).astype(_DTYPES[precision])
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, precision: str = "single", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPES[precision]), requires_grad=requires_grad)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(y, (a,), "sigmoid", lambda g: (g * y * (1 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: (g * (1 - y * y),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    s = x.dtype.type(slope)
    # max(x, s*x) equals the piecewise definition for 0 <= s <= 1
    y = np.maximum(x, x * s) if 0 <= slope <= 1 else np.where(x > 0, x, x * s)
    return _make(y, (a,), "leaky_relu",
                 lambda g: (np.where(x > 0, g, g * s),))


def log(a: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log with the input clamped below at ``clamp``."""
    x = a.data
    xc = np.maximum(x, x.dtype.type(clamp))
    live = x >= clamp
    return _make(np.log(xc), (a,), "log", lambda g: (np.where(live, g / xc, 0),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient is zero where clamping is active."""
    x = a.data
    live = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), "clip", lambda g: (np.where(live, g, 0),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), "exp", lambda g: (g * y,))


_POINTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "log": log,
    "mul": mul,
    "add": add,
    "sub": sub,
}


def pointwise(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name (``leaky_relu`` takes ``slope``)."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise op {kind!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------- reductions / losses

def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    dtype = a.data.dtype
    return _make(np.asarray(a.data.sum(), dtype=dtype), (a,), "sum",
                 lambda g: (np.broadcast_to(np.asarray(g, dtype=dtype), shape),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return mul(sum(a), 1.0 / n)


def l2_loss(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance ``sum((a - b)**2)`` as a scalar."""
    b = as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"l2_loss: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    return _make(np.asarray(np.sum(d * d), dtype=a.data.dtype), (a, b), "l2_loss",
                 lambda g: (2 * g * d, -2 * g * d))


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(y, (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.data.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), "getitem", bw)


def take_rows(a: Tensor, rows) -> Tensor:
    """Gather rows of a matrix; repeated rows accumulate their gradients."""
    rows = np.asarray(rows, dtype=np.intp)
    src_shape, dtype = a.shape, a.data.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, rows, g)
        return (out,)

    return _make(a.data[rows], (a,), "take_rows", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    y = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(y, tensors, "stack", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(y, tensors, "concat", bw)


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Explicit broadcast add of a vector along ``axis`` of ``x``."""
    ax = axis % x.data.ndim
    if b.data.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.data.ndim
    view[ax] = -1
    others = tuple(i for i in range(x.data.ndim) if i != ax)
    return _make(x.data + b.data.reshape(view), (x, b), "add_bias",
                 lambda g: (g, g.sum(axis=others)))


def broadcast_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Tile ``(B, C)`` into constant maps ``(B, C, height, width)``."""
    if x.data.ndim != 2:
        raise ShapeError(f"broadcast_spatial expects (B, C), got {x.shape}")
    y = np.broadcast_to(x.data[:, :, None, None], x.shape + (height, width)).copy()
    return _make(y, (x,), "broadcast_spatial", lambda g: (g.sum(axis=(2, 3)),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul",
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None))


def _as_batch(x: Tensor, op: str):
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim == 4:
        return x, False
    raise ShapeError(f"{op} expects (C, H, W) or (B, C, H, W), got {x.shape}")


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def deconv_out_size(size: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def _to_nchw(rows: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(b, h, w, -1).transpose(0, 3, 1, 2))


def _to_rows(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(b * h * w, c)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``(B, C_in, H, W)`` (or unbatched) with ``(C_out, C_in, k, k)``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xb, squeeze = _as_batch(x, "conv2d")
    c_out, c_in, k, k2 = kernels.shape
    nb, c, h, w = xb.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {c_in}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{w} (+{padding})")
    oh, ow = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    cols = _backend.im2col(_pad(xb.data, padding), k, stride, oh, ow)
    wmat = kernels.data.reshape(c_out, -1)
    y = _to_nchw(cols @ wmat.T, nb, oh, ow)

    def bw(g):
        g2 = _to_rows(g)
        gw = (g2.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if xb.requires_grad:
            gxp = _backend.col2im(g2 @ wmat, c, k, stride, oh, ow, hp, wp)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    out = _make(y, (xb, kernels), "conv2d", bw)
    if bias is not None:
        out = add_bias(out, bias, axis=1)
    return reshape(out, out.shape[1:]) if squeeze else out


def deconv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
             output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``kernels`` is ``(C_in, C_out, k, k)``.

    With the same kernel tensor this is the adjoint of :func:`conv2d` mapping
    ``C_out`` channels to ``C_in``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not 0 <= output_padding < stride:
        raise ValueError(f"output_padding {output_padding} must be in [0, stride={stride})")
    xb, squeeze = _as_batch(x, "deconv2d")
    c_in, c_out, k, k2 = kernels.shape
    nb, c, h, w = xb.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if c != c_in:
        raise ShapeError(f"deconv2d: input has {c} channels, kernels expect {c_in}")
    oh, ow = deconv_out_size(h, k, stride, padding, output_padding), deconv_out_size(w, k, stride, padding, output_padding)
    if oh < 1 or ow < 1:
        raise ShapeError("deconv2d: non-positive output size")
    hp, wp = oh + 2 * padding, ow + 2 * padding
    wmat = kernels.data.reshape(c_in, -1)
    xr = _to_rows(xb.data)
    yp = _backend.col2im(xr @ wmat, c_out, k, stride, h, w, hp, wp)
    y = np.ascontiguousarray(yp[:, :, padding:padding + oh, padding:padding + ow]) if padding else yp

    def bw(g):
        gcols = _backend.im2col(_pad(g, padding), k, stride, h, w)
        gx = _to_nchw(gcols @ wmat.T, nb, h, w) if xb.requires_grad else None
        gw = (xr.T @ gcols).reshape(kernels.shape) if kernels.requires_grad else None
        return gx, gw

    out = _make(y, (xb, kernels), "deconv2d", bw)
    if bias is not None:
        out = add_bias(out, bias, axis=1)
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------- driving

def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    if loss.requires_grad:
        seed = np.ones(loss.shape, dtype=loss.data.dtype)
        if loss._ctx is None:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        else:
            tape.replay(loss, seed)
    return tape


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """``p <- p - lr * grad`` then clear grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        if lr != 0:
            p.data -= p.data.dtype.type(lr) * p.grad
        p.grad = None


@dataclass
class AdamState:
    """First and second moment buffers plus the step counter for one parameter group."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(named: Iterable[tuple[str, Tensor]], lr: float, state: AdamState, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update keyed by parameter name, then clear grads.

    Moments are kept in the parameter's precision and updated in a fixed
    order, so a run restored from saved moments continues bit-identically.
    """
    named = list(named)
    for name, p in named:
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in named:
        dt = p.data.dtype.type
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        if lr != 0:
            p.data -= dt(lr / c1) * m / (np.sqrt(v / dt(c2)) + dt(eps))
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
