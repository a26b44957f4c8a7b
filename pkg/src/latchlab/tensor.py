"""Dense tensors with reverse-mode automatic differentiation.

Design notes:

* Eager numpy execution; each produced tensor records its parents and a
  VJP closure, so the tape is the tensor graph itself (dynamic, rebuilt
  every forward call).
* float32 by default; reductions accumulate in float64 before casting
  back. float64 tensors are supported for gradient verification.
* Broadcasting is restricted to leading-axis expansion: operand shapes
  must be equal, or one must be a trailing suffix of the other (scalars
  count as the empty suffix). Anything else needs an explicit expand()
  or reshape().
* A process-wide arena tracks live payload bytes (peak memory metric)
  and recycles freed buffers, because glibc hands large temporaries back
  to the OS and the page-fault churn dominates small-model training.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "arena",
    "matmul",
    "conv1d",
    "conv_transpose1d",
    "concatenate",
    "expand",
    "frame_signal",
    "gather_rows",
    "layer_norm",
    "softmax",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


# ---------------------------------------------------------------------------
# arena: live-byte accounting + buffer recycling
# ---------------------------------------------------------------------------


class _Arena:
    """Tracks live tensor payload bytes and recycles freed buffers.

    take/give recycle raw scratch arrays; the live/peak counters follow
    tensor payloads only (one count per buffer, however many tensors
    share it), which is the artifact's memory metric.
    """

    _POOL_PER_KEY = 16
    _POOL_MAX_BYTES = 768 * 1024 * 1024

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self._pool: dict[tuple, list[np.ndarray]] = {}
        self._pool_bytes = 0

    def reset_peak(self):
        self.peak_bytes = self.live_bytes

    def _on_alloc(self, nbytes: int):
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def _on_release(self, arr: np.ndarray):
        self.live_bytes -= arr.nbytes
        self.give(arr)

    def take(self, shape: tuple, dtype) -> np.ndarray:
        """Uninitialized buffer of the given shape; recycled when possible."""
        key = (np.dtype(dtype).str, tuple(shape))
        bucket = self._pool.get(key)
        if bucket:
            self._pool_bytes -= bucket[-1].nbytes
            return bucket.pop()
        return np.empty(shape, dtype=dtype)

    def zeros(self, shape: tuple, dtype) -> np.ndarray:
        out = self.take(shape, dtype)
        out[...] = 0
        return out

    def give(self, arr: np.ndarray):
        """Return a scratch buffer. The caller must drop its reference."""
        if arr.base is not None or not arr.flags.c_contiguous:
            return
        key = (arr.dtype.str, arr.shape)
        bucket = self._pool.setdefault(key, [])
        if (
            len(bucket) < self._POOL_PER_KEY
            and self._pool_bytes + arr.nbytes <= self._POOL_MAX_BYTES
        ):
            bucket.append(arr)
            self._pool_bytes += arr.nbytes

    def trim(self):
        self._pool.clear()
        self._pool_bytes = 0


arena = _Arena()


class _Buf:
    """Ownership token for one payload array.

    Tensors sharing data (detach) share one _Buf, so live bytes count each
    buffer once and the array returns to the pool only when the last
    referencing tensor dies.
    """

    __slots__ = ("arr", "__weakref__")

    def __init__(self, arr: np.ndarray):
        self.arr = arr
        arena._on_alloc(arr.nbytes)
        weakref.finalize(self, arena._on_release, arr)


# ---------------------------------------------------------------------------
# tensor + tape
# ---------------------------------------------------------------------------

_seq_counter = 0


def _next_seq() -> int:
    global _seq_counter
    _seq_counter += 1
    return _seq_counter


class Tensor:
    """A dense float array plus an optional gradient tape node."""

    __slots__ = ("_buf", "requires_grad", "grad", "_parents", "_vjp", "_op", "_seq")

    # keep numpy from absorbing us in mixed expressions (np + Tensor must
    # dispatch to our __radd__, not build an object array)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # float32 unless float64 is requested explicitly; the engine owns
        # its payloads (buffers get recycled), so always copy.
        if dtype is None:
            arr = np.asarray(data)
            arr = arr.astype(np.float32)
        else:
            dt = np.dtype(dtype)
            if dt not in (np.float32, np.float64):
                raise TypeError(f"unsupported dtype {dt}; use float32 or float64")
            arr = np.asarray(data, dtype=dt).copy()
        self._buf = _Buf(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op: str = "leaf"
        self._seq = _next_seq()

    # internal constructor for op outputs: takes ownership, no copy
    @staticmethod
    def _wrap(arr: np.ndarray, op: str, parents: tuple, vjp) -> "Tensor":
        t = object.__new__(Tensor)
        t._buf = _Buf(arr)
        t.requires_grad = any(p.requires_grad for p in parents)
        t.grad = None
        if t.requires_grad:
            t._parents = parents
            t._vjp = vjp
        else:
            t._parents = ()
            t._vjp = None
        t._op = op
        t._seq = _next_seq()
        return t

    # --- basic properties ---

    @property
    def data(self) -> np.ndarray:
        return self._buf.arr

    @property
    def shape(self) -> tuple:
        return self._buf.arr.shape

    @property
    def ndim(self) -> int:
        return self._buf.arr.ndim

    @property
    def size(self) -> int:
        return self._buf.arr.size

    @property
    def dtype(self):
        return self._buf.arr.dtype

    def numpy(self) -> np.ndarray:
        """Copy of the payload (never aliases recycled storage)."""
        return self._buf.arr.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self._buf.arr.reshape(-1)[0])

    def detach(self) -> "Tensor":
        t = object.__new__(Tensor)
        t._buf = self._buf
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._vjp = None
        t._op = "detach"
        t._seq = _next_seq()
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, grad={self.requires_grad})"

    # --- backward ---

    def backward(self, grad: np.ndarray | None = None):
        """Reverse-mode sweep from this tensor.

        Without an explicit cotangent the output must be scalar. Gradients
        accumulate additively into every requires_grad leaf (call
        zero_grad between passes if accumulation is not wanted).
        """
        if not self.requires_grad:
            raise RuntimeError(
                "backward() on a tensor with no recorded computation "
                "(requires_grad is False or graph detached)"
            )
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() needs a scalar output, got shape {self.shape}; "
                    "pass an explicit cotangent for non-scalar outputs"
                )
            grad = np.ones_like(self._buf.arr)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(
                    f"cotangent shape {grad.shape} != tensor shape {self.shape}"
                )

        # Topological order (iterative DFS; deterministic by parent order).
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg

    # --- operator sugar ---

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _slice(self, idx)

    # method aliases used throughout the models
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# broadcasting rule: leading-axis expansion only
# ---------------------------------------------------------------------------


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb):
        lo, hi = sb, sa
    else:
        lo, hi = sa, sb
    if len(lo) == 0 or hi[len(hi) - len(lo):] == lo:
        return hi
    raise ShapeError(
        f"{op}: shapes {sa} and {sb} are not equal and neither is a "
        f"trailing suffix of the other (only leading-axis broadcasting is "
        f"supported; reshape/expand explicitly)"
    )


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes added by broadcasting."""
    if g.shape == shape:
        return g
    n_extra = g.ndim - len(shape)
    if n_extra > 0:
        g = g.sum(axis=tuple(range(n_extra)), dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _binop(op: str, ufunc, a: Tensor, b) -> tuple:
    b = _as_tensor(b, a.dtype)
    shape = _check_broadcast(op, a, b)
    out = arena.take(shape, a.dtype if a.ndim >= b.ndim else b.dtype)
    ufunc(a.data, b.data, out=out)
    return b, out


def add(a: Tensor, b) -> Tensor:
    b, out = _binop("add", np.add, a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._wrap(out, "add", (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b, out = _binop("sub", np.subtract, a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._wrap(out, "sub", (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b, out = _binop("mul", np.multiply, a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = arena.take(g.shape, g.dtype)
        np.multiply(g, bd, out=ga)
        gb = arena.take(g.shape, g.dtype)
        np.multiply(g, ad, out=gb)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return Tensor._wrap(out, "mul", (a, b), vjp)


def div(a: Tensor, b) -> Tensor:
    b, out = _binop("div", np.divide, a, b)
    bd, od = b.data, out

    def vjp(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * od / bd, b.shape)

    return Tensor._wrap(out, "div", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor._wrap(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** np.asarray(p, dtype=a.dtype)
    ad = a.data

    def vjp(g):
        return (g * p * ad ** np.asarray(p - 1.0, dtype=ad.dtype),)

    return Tensor._wrap(out, "power", (a,), vjp)


def texp(a: Tensor) -> Tensor:
    out = arena.take(a.shape, a.dtype)
    np.exp(a.data, out=out)
    return Tensor._wrap(out, "exp", (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    out = arena.take(a.shape, a.dtype)
    np.log(a.data, out=out)
    ad = a.data
    return Tensor._wrap(out, "log", (a,), lambda g: (g / ad,))


def tsqrt(a: Tensor) -> Tensor:
    out = arena.take(a.shape, a.dtype)
    np.sqrt(a.data, out=out)

    def vjp(g):
        return (g * np.asarray(0.5, dtype=out.dtype) / out,)

    return Tensor._wrap(out, "sqrt", (a,), vjp)


def tabs(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    ad = a.data
    return Tensor._wrap(out, "abs", (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # stable in both tails: exp of -|x| only
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._wrap(out, "sigmoid", (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = arena.take(a.shape, a.dtype)
    np.tanh(a.data, out=out)
    return Tensor._wrap(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    c = np.asarray(_GELU_C, dtype=x.dtype)
    al = np.asarray(_GELU_A, dtype=x.dtype)
    th = arena.take(a.shape, a.dtype)
    np.multiply(x, x, out=th)
    th *= al
    th += 1.0
    th *= x
    th *= c
    np.tanh(th, out=th)  # th = tanh(c*(x + al*x^3))
    out = arena.take(a.shape, a.dtype)
    np.add(th, 1.0, out=out)
    out *= x
    out *= 0.5

    def vjp(g):
        # d = 0.5(1+th) + 0.5 x (1-th^2) c (1 + 3 al x^2), built in place
        d = arena.take(g.shape, g.dtype)
        np.multiply(x, x, out=d)
        d *= 3.0 * float(al)
        d += 1.0
        d *= float(c) * 0.5
        d *= x
        t2 = arena.take(g.shape, g.dtype)
        np.multiply(th, th, out=t2)
        np.subtract(1.0, t2, out=t2)
        d *= t2
        np.add(th, 1.0, out=t2)
        t2 *= 0.5
        d += t2
        d *= g
        return (d,)

    return Tensor._wrap(out, "gelu", (a,), vjp)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    if lo is None and hi is None:
        raise ValueError("clamp: need at least one bound")
    out = np.clip(a.data, lo, hi)
    ad = a.data

    def vjp(g):
        mask = np.ones_like(ad, dtype=bool)
        if lo is not None:
            mask &= ad >= lo
        if hi is not None:
            mask &= ad <= hi
        return (g * mask,)

    return Tensor._wrap(out, "clamp", (a,), vjp)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def vjp(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).copy(),)

    return Tensor._wrap(out, "sum", (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape
    inv = 1.0 / n

    def vjp(g):
        gg = g * np.asarray(inv, dtype=g.dtype)
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).copy(),)

    return Tensor._wrap(out, "mean", (a,), vjp)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if len(axes) != 1:
        raise ShapeError("max supports a single axis")
    ax = axes[0]
    out = a.data.max(axis=ax, keepdims=keepdims)
    idx = a.data.argmax(axis=ax)  # first occurrence on ties: deterministic
    shape = a.shape

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, ax), gg, axis=ax)
        return (gx,)

    return Tensor._wrap(out, "max", (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    x = a.data
    m = x.max(axis=ax, keepdims=True)
    out = arena.take(a.shape, a.dtype)
    np.subtract(x, m, out=out)
    np.exp(out, out=out)
    s = out.sum(axis=ax, keepdims=True, dtype=np.float64).astype(x.dtype)
    out /= s

    def vjp(g):
        prod = arena.take(g.shape, g.dtype)
        np.multiply(g, out, out=prod)
        dot = prod.sum(axis=ax, keepdims=True, dtype=np.float64).astype(g.dtype)
        gx = arena.take(g.shape, g.dtype)
        np.subtract(g, dot, out=gx)
        gx *= out
        return (gx,)

    return Tensor._wrap(out, "softmax", (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"must equal last axis ({x.shape[-1]},)"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = arena.take(x.shape, x.dtype)
    np.subtract(xd, mu.astype(xd.dtype), out=xhat)
    xhat *= inv
    out = arena.take(x.shape, x.dtype)
    np.multiply(xhat, gamma.data, out=out)
    out += beta.data
    gd = gamma.data

    def vjp(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        dx = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead, dtype=np.float64).astype(g.dtype)
        dbeta = g.sum(axis=lead, dtype=np.float64).astype(g.dtype)
        return dx, dgamma, dbeta

    return Tensor._wrap(out, "layer_norm", (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    view = a.data.reshape(shape)  # contiguous payload: a view, resolves -1
    out = arena.take(view.shape, a.dtype)
    np.copyto(out, view)
    orig = a.shape
    return Tensor._wrap(out, "reshape", (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, *axes) -> Tensor:
    if len(axes) == 0:
        axes = tuple(reversed(range(a.ndim)))
    elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = np.argsort(axes)
    view = a.data.transpose(axes)
    out = arena.take(view.shape, a.dtype)
    np.copyto(out, view)

    def vjp(g):
        gview = g.transpose(inv)
        gx = arena.take(gview.shape, g.dtype)
        np.copyto(gx, gview)
        return (gx,)

    return Tensor._wrap(out, "transpose", (a,), vjp)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast to `shape` (1-sized and missing leading axes grow)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}") from e
    orig = a.shape

    def vjp(g):
        n_extra = g.ndim - len(orig)
        axes = list(range(n_extra))
        for i, s in enumerate(orig):
            if s == 1 and g.shape[n_extra + i] != 1:
                axes.append(n_extra + i)
        gg = g.sum(axis=tuple(axes), keepdims=False, dtype=np.float64).astype(g.dtype)
        return (gg.reshape(orig),)

    return Tensor._wrap(out, "expand", (a,), vjp)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    ax = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return Tensor._wrap(out, "concatenate", tuple(ts), vjp)


def _slice(a: Tensor, idx) -> Tensor:
    view = a.data[idx]
    out = arena.take(view.shape, a.dtype)
    np.copyto(out, view)
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[idx] = g
        return (gx,)

    return Tensor._wrap(out, "slice", (a,), vjp)


def frame_signal(x: Tensor, frame_len: int, hop: int) -> Tensor:
    """Overlapping frames of a 1-D signal: (N,) -> (n_frames, frame_len).

    n_frames = (N - frame_len) // hop + 1. The VJP is the overlap-add
    scatter of the frame gradients.
    """
    if x.ndim != 1:
        raise ShapeError(f"frame_signal expects a 1-D signal, got {x.shape}")
    N = x.shape[0]
    if N < frame_len:
        raise ShapeError(f"signal length {N} < frame length {frame_len}")
    out = np.ascontiguousarray(
        np.lib.stride_tricks.sliding_window_view(x.data, frame_len)[::hop]
    )
    n_frames = out.shape[0]

    def vjp(g):
        gx = np.zeros(N, dtype=g.dtype)
        for k in range(frame_len):
            gx[k : k + hop * n_frames : hop] += g[:, k]
        return (gx,)

    return Tensor._wrap(out, "frame_signal", (x,), vjp)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup table[idx] along axis 0 (integer indices)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.ascontiguousarray(table.data[idx])
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor._wrap(out, "gather", (table,), vjp)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

_BIG_OUT_BYTES = 4 * 1024 * 1024


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product routed through the pool for large results.

    Fresh numpy allocations above glibc's mmap ceiling page-fault on every
    call, which dominates big conv columns; small results are faster on
    numpy's no-out fast path.
    """
    lead = a.shape[:-2] if a.ndim >= b.ndim else b.shape[:-2]
    shape = lead + (a.shape[-2], b.shape[-1])
    n = 1
    for s in shape:
        n *= s
    if n * a.itemsize >= _BIG_OUT_BYTES:
        out = arena.take(shape, a.dtype)
        return np.matmul(a, b, out=out)
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la != lb and la != () and lb != ():
        raise ShapeError(
            f"matmul: leading dims must match or be absent, {a.shape} @ {b.shape}"
        )
    out = _matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return _reduce_to(ga, ad.shape), _reduce_to(gb, bd.shape)

    return Tensor._wrap(out, "matmul", (a, b), vjp)


# ---------------------------------------------------------------------------
# 1-D convolutions (batch-first, channels-first: x is (B, C, L))
# ---------------------------------------------------------------------------


def _conv_cols(x: np.ndarray, K: int, stride: int, pad: int) -> np.ndarray:
    """im2col in matmul-ready layout: (B, C, L) -> (B, C*K, L_out).

    Strided access is phase-split so reads and writes stay contiguous
    (the naive windowed copy is memory-bound at 1/stride cache use).
    """
    B, C, L = x.shape
    Lp = L + 2 * pad
    L_out = (Lp - K) // stride + 1
    n4 = (Lp + stride - 1) // stride
    xp = None
    if pad or (stride > 1 and n4 * stride != Lp):
        tail = (n4 * stride - Lp) if stride > 1 else 0
        xp = arena.take((B, C, Lp + tail), x.dtype)
        xp[:, :, :pad] = 0
        xp[:, :, pad : pad + L] = x
        xp[:, :, pad + L :] = 0
        x = xp
    cols = arena.take((B, C, K, L_out), x.dtype)
    if stride == 1:
        for k in range(K):
            cols[:, :, k, :] = x[:, :, k : k + L_out]
    else:
        x4 = x.reshape(B, C, n4, stride)
        phase = arena.take((B, C, n4), x.dtype)
        for r in range(stride):
            np.copyto(phase, x4[:, :, :, r])  # one strided read per phase
            for q in range((K - r + stride - 1) // stride):
                k = q * stride + r
                cols[:, :, k, :] = phase[:, :, q : q + L_out]
        arena.give(phase)
        del x4
    if xp is not None:
        del x
        arena.give(xp)
    return cols.reshape(B, C * K, L_out)


def _conv_dx(g: np.ndarray, w: np.ndarray, stride: int, pad: int, L_in: int) -> np.ndarray:
    """Scatter grad (B, Co, L_out) back to input (B, Ci, L_in) for kernel w (Co, Ci, K)."""
    B, Co, L_out = g.shape
    _, Ci, K = w.shape
    # (Ci*K, Co) @ (B, Co, L_out) -> (B, Ci*K, L_out), already scatter-ordered
    wt = np.ascontiguousarray(w.reshape(Co, Ci * K).T)
    gbuf = _matmul(wt, g)
    gcols = gbuf.reshape(B, Ci, K, L_out)
    Lp = L_in + 2 * pad
    if stride == 1:
        gxbuf = arena.zeros((B, Ci, Lp), g.dtype)
        for k in range(K):
            gxbuf[:, :, k : k + L_out] += gcols[:, :, k, :]
    else:
        # overlap-add per stride phase on contiguous accumulators
        n4 = (Lp + stride - 1) // stride
        gxbuf = arena.take((B, Ci, n4, stride), g.dtype)
        acc = arena.take((B, Ci, n4), g.dtype)
        for r in range(stride):
            nq = (K - r + stride - 1) // stride
            if nq == 0:
                gxbuf[:, :, :, r] = 0.0
                continue
            acc[...] = 0.0
            for q in range(nq):
                k = q * stride + r
                acc[:, :, q : q + L_out] += gcols[:, :, k, :]
            gxbuf[:, :, :, r] = acc  # one strided write per phase
        arena.give(acc)
    del gcols, gbuf
    gx_view = gxbuf.reshape(B, Ci, -1)[:, :, pad : pad + L_in]
    gx = arena.take((B, Ci, L_in), g.dtype)
    np.copyto(gx, gx_view)
    del gx_view
    arena.give(gxbuf)
    return gx


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """x (B, Ci, L), w (Co, Ci, K), optional bias (Co,) -> (B, Co, L_out)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape} incompatible with w {w.shape}")
    B, Ci, L = x.shape
    Co, _, K = w.shape
    L_out = (L + 2 * pad - K) // stride + 1
    cols = _conv_cols(x.data, K, stride, pad)  # (B, Ci*K, L_out)
    out = _matmul(w.data.reshape(Co, Ci * K), cols)
    if b is not None:
        out += b.data[:, None]
    wd = w.data

    def vjp(g):
        gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(Co, Ci, K)
        gx = _conv_dx(g, wd, stride, pad, L)
        gb = None
        if b is not None:
            gb = g.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype)
        return (gx, gw.astype(g.dtype), gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._wrap(out, "conv1d", parents, vjp)


def conv_transpose1d(
    x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0
) -> Tensor:
    """x (B, Ci, L), w (Ci, Co, K) -> (B, Co, (L-1)*stride - 2*pad + K)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose1d: x {x.shape} incompatible with w {w.shape}")
    B, Ci, L = x.shape
    _, Co, K = w.shape
    L_out = (L - 1) * stride - 2 * pad + K
    # Transposed conv forward is exactly the input-gradient scatter of a
    # conv: _conv_dx maps "grad" channels (first w axis) to output channels
    # (second w axis), so the (Ci, Co, K) kernel layout drops straight in.
    out = _conv_dx(x.data, w.data, stride, pad, L_out)
    if b is not None:
        out = out + b.data[None, :, None]
    xd, wd = x.data, w.data

    def vjp(g):
        # dL/dx: correlate g with w (a plain conv of the output gradient)
        cols = _conv_cols(g, K, stride, pad)  # (B, Co*K, L)
        gx = _matmul(wd.reshape(Ci, Co * K), cols)
        # dL/dw: correlate x with the output-gradient columns
        gw = np.matmul(cols, xd.transpose(0, 2, 1)).sum(axis=0)
        gw = np.ascontiguousarray(gw.T).reshape(Ci, Co, K)
        gb = None
        if b is not None:
            gb = g.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype)
        base = cols.base if cols.base is not None else cols
        del cols
        arena.give(base)
        return (gx, gw.astype(g.dtype), gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._wrap(out, "conv_transpose1d", parents, vjp)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    fn: Callable[[Tensor], Tensor], leaf: Tensor, eps: float = 1e-3
) -> float:
    """Max relative error between tape gradients and central differences.

    `fn` maps the leaf tensor to a scalar output. Relative error per leaf
    element is |analytic - numeric| / max(|analytic|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf.zero_grad()
    out = fn(leaf)
    if out.size != 1:
        raise ShapeError("finite_diff_check: fn must return a scalar")
    out.backward()
    analytic = leaf.grad.copy()

    base = leaf.data.copy()
    numeric = np.zeros_like(base)
    flat = leaf.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(leaf).item()
        flat[i] = orig - eps
        f_minus = fn(leaf).item()
        flat[i] = orig
        nflat[i] = (f_plus - f_minus) / (2.0 * eps)
    leaf.data[...] = base

    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
