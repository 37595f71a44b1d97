"""Dense tensors with reverse-mode automatic differentiation.

This is a deliberately small engine: it implements exactly the operation
set the quality network needs (strip/standard convolutions, GroupNorm,
adaptive pooling, SE gating, an MLP head and the training losses) on top
of contiguous numpy arrays.

Recording model: operations executed while a :class:`GraphTape` is active
append one entry per op, in execution order. ``tape.backward(loss)`` seeds
the loss gradient and replays the entries in exact reverse recording
order, accumulating gradients into the ``grad`` field of every tensor
that requires them. Running an op with no active tape performs the plain
forward computation only; this is the inference mode and is safe for
concurrent read-only use of frozen parameters. A tape and the tensors it
records are confined to a single thread for the duration of a step.

float64 is the default dtype (gradient checks need the headroom);
float32 arrays are accepted everywhere as an opt-in speed mode.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(RuntimeError):
    """The autodiff API was called in an unsupported way."""


_state = threading.local()


def _active_tape() -> Optional["GraphTape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """A dense n-d array plus its gradient and graph bookkeeping.

    ``data`` is always a contiguous float array. ``grad`` is lazily
    allocated by the backward pass and has the same shape as ``data``.
    ``node_id`` is the index of the op that produced this tensor on the
    recording tape (None for leaves or untaped results).
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar used by the losses; heavy ops are module functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise UsageError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(scalar))


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward_fn", "op_name")

    def __init__(self, output, inputs, backward_fn, op_name):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op_name = op_name


class GraphTape:
    """Ordered record of executed operations for one backward pass.

    Entries are appended in execution order, which is necessarily
    topological; ``backward`` visits them in exact reverse order. Use as
    a context manager around the forward computation::

        tape = GraphTape()
        with tape:
            loss = model_loss(...)
        tape.backward(loss)

    Calling ``backward`` twice without clearing gradients accumulates
    into ``grad`` (documented behaviour, matching the += semantics of
    gradient accumulation).
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __len__(self):
        return len(self._entries)

    def __enter__(self):
        if _active_tape() is not None:
            raise UsageError("a GraphTape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def _record(self, output: Tensor, inputs: Sequence[Tensor],
                backward_fn: Callable, op_name: str):
        output.node_id = len(self._entries)
        self._entries.append(_TapeEntry(output, tuple(inputs), backward_fn, op_name))

    def op_names(self):
        return [e.op_name for e in self._entries]

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every recorded tensor reachable from ``loss``."""
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._entries:
            raise UsageError("backward on an empty tape")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for entry in reversed(self._entries):
            gout = entry.output.grad
            if gout is None:
                continue  # not reachable from the loss
            grads = entry.backward_fn(gout)
            for tin, g in zip(entry.inputs, grads):
                if g is None or not tin.requires_grad:
                    continue
                if tin.grad is None:
                    # may alias the upstream gradient; accumulation below is
                    # out-of-place, so shared buffers are never mutated
                    tin.grad = g
                else:
                    tin.grad = tin.grad + g


def _make(data, inputs, backward_fn, op_name) -> Tensor:
    """Wrap an op result, recording it when a tape is active."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._record(out, inputs, backward_fn, op_name)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                 "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data - b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
                 "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; shapes must be numpy-broadcast compatible.

    Broadcasting is supported only to the extent the network needs it
    (SE gating multiplies (N,C,H,W) by (N,C,1,1), and scalars scale
    loss terms).
    """
    if not isinstance(b, Tensor) and np.isscalar(b):
        k = float(b)
        return _make(a.data * k, (a,), lambda g: (g * k,), "mul_scalar")
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad * bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape),
                            _unbroadcast(g * ad, b.shape)),
                 "mul")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _make(out, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_stable(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably for large |x|."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_stable(x)
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tsum(a: Tensor) -> Tensor:
    out = a.data.sum()
    return _make(np.asarray(out), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),),
                 "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()
    return _make(np.asarray(out), (a,),
                 lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype),),
                 "mean")


def take(a: Tensor, indices) -> Tensor:
    """Gather elements of a 1-d tensor; used to form ranking pairs."""
    if a.data.ndim != 1:
        raise ShapeError(f"take expects a 1-d tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), bwd, "take")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bwd, "concat")


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator],
            train: bool) -> Tensor:
    """Inverted dropout: scales by 1/(1-rate) at train time, identity in eval.

    The caller owns ``rng``; eval mode never touches it.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise UsageError("train-mode dropout needs an rng")
    draw_dtype = np.float32 if a.data.dtype == np.float32 else np.float64
    mask = (rng.random(a.shape, dtype=draw_dtype) >= rate).astype(a.data.dtype)
    mask *= 1.0 / (1.0 - rate)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w.T + b with x (B, in), w (out, in), b (out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear feature mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data

    def bwd(g):
        gx = g @ w.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(out, inputs, bwd, "linear")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-d cross-correlation of an NCHW batch with OIKhKw weights.

    Internally runs in NHWC layout so that the im2col patch rows are
    contiguous and the whole op reduces to one GEMM; this matters because
    the strip kernels (1xk / kx1) dominate training time.
    """
    stride = _pair(stride, "stride")
    padding = _pair(padding, "padding")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be OIKhKw, got shape {w.shape}")
    n, c, h, wd_ = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {i}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {o} output channels")
    sy, sx = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sy + 1
    wo = (wd_ + 2 * pw - kw) // sx + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{wd_}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")

    cols = _im2col(x.data, kh, kw, sy, sx, ph, pw, ho, wo)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    y2 = cols @ wmat
    if b is not None:
        y2 += b.data
    y = np.ascontiguousarray(y2.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    # keep the patch matrix for backward while it is cheap; huge ones are
    # rebuilt instead so peak memory stays bounded
    saved_cols = cols if cols.nbytes <= _COLS_CACHE_BYTES else None

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        cols_b = saved_cols if saved_cols is not None else _im2col(
            x.data, kh, kw, sy, sx, ph, pw, ho, wo)
        gw = (cols_b.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, h + 2 * ph, wd_ + 2 * pw, c), dtype=x.data.dtype)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, dy:dy + ho * sy:sy, dx:dx + wo * sx:sx, :] += gcols[:, :, :, dy, dx, :]
            gx = np.ascontiguousarray(
                gxp[:, ph:ph + h, pw:pw + wd_, :].transpose(0, 3, 1, 2))
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(y, inputs, bwd, "conv2d")


_COLS_CACHE_BYTES = 64 * 1024 * 1024


def _im2col(xd, kh, kw, sy, sx, ph, pw, ho, wo):
    """Extract conv patches as a (N*Ho*Wo, kh*kw*C) matrix in NHWC order."""
    n, c, h, w = xd.shape
    xp = np.pad(xd.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, kh, kw, c),
        (s[0], s[1] * sy, s[2] * sx, s[1], s[2], s[3]), writeable=False)
    return win.reshape(n * ho * wo, kh * kw * c)


def _pair(v, name):
    if isinstance(v, int):
        return (v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 2:
        raise ValueError(f"{name} must be an int or a pair")
    return v


# ---------------------------------------------------------------------------
# normalization and pooling
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """GroupNorm over an NCHW batch: per-sample, per-group standardization."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm gamma/beta must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    gam = gamma.data.reshape(1, c, 1, 1)
    y = xhat * gam + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxh = (g * gam).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m1 = dxh.mean(axis=2, keepdims=True)
        m2 = (dxh * xh).mean(axis=2, keepdims=True)
        dx = (inv * (dxh - m1 - xh * m2)).reshape(n, c, h, w)
        return (dx, dgamma, dbeta)

    return _make(y, (x, gamma, beta), bwd, "group_norm")


def _pool_edges(extent: int, grid: int):
    """Contiguous floor-boundary bin edges covering every pixel once."""
    return [(extent * i) // grid for i in range(grid + 1)]


def adaptive_avg_pool(x: Tensor, grid: int) -> Tensor:
    """Average-pool an NCHW batch to a grid x grid output.

    Bins partition each spatial axis at floor(i*extent/grid); every pixel
    belongs to exactly one bin.
    """
    n, c, h, w = _check_pool(x, grid)
    re = _pool_edges(h, grid)
    ce = _pool_edges(w, grid)
    out = np.empty((n, c, grid, grid), dtype=x.data.dtype)
    for bi in range(grid):
        for bj in range(grid):
            out[:, :, bi, bj] = x.data[:, :, re[bi]:re[bi + 1], ce[bj]:ce[bj + 1]].mean(axis=(2, 3))

    def bwd(g):
        gx = np.zeros_like(x.data)
        for bi in range(grid):
            for bj in range(grid):
                cnt = (re[bi + 1] - re[bi]) * (ce[bj + 1] - ce[bj])
                gx[:, :, re[bi]:re[bi + 1], ce[bj]:ce[bj + 1]] = (g[:, :, bi, bj] / cnt)[:, :, None, None]
        return (gx,)

    return _make(out, (x,), bwd, "adaptive_avg_pool")


def adaptive_max_pool(x: Tensor, grid: int) -> Tensor:
    """Max-pool an NCHW batch to a grid x grid output over the same bins
    as :func:`adaptive_avg_pool`. Ties resolve to the first element in
    row-major order, so eval outputs are deterministic."""
    n, c, h, w = _check_pool(x, grid)
    re = _pool_edges(h, grid)
    ce = _pool_edges(w, grid)
    out = np.empty((n, c, grid, grid), dtype=x.data.dtype)
    argmaxes = {}
    for bi in range(grid):
        for bj in range(grid):
            sl = x.data[:, :, re[bi]:re[bi + 1], ce[bj]:ce[bj + 1]]
            flat = sl.reshape(n, c, -1)
            am = flat.argmax(axis=2)
            argmaxes[(bi, bj)] = am
            out[:, :, bi, bj] = np.take_along_axis(flat, am[:, :, None], axis=2)[:, :, 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        for bi in range(grid):
            for bj in range(grid):
                bh = re[bi + 1] - re[bi]
                bw = ce[bj + 1] - ce[bj]
                gsl = np.zeros((n, c, bh * bw), dtype=x.data.dtype)
                np.put_along_axis(gsl, argmaxes[(bi, bj)][:, :, None],
                                  g[:, :, bi, bj][:, :, None], axis=2)
                gx[:, :, re[bi]:re[bi + 1], ce[bj]:ce[bj + 1]] = gsl.reshape(n, c, bh, bw)
        return (gx,)

    return _make(out, (x,), bwd, "adaptive_max_pool")


def _check_pool(x: Tensor, grid: int):
    if x.data.ndim != 4:
        raise ShapeError(f"pooling input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if grid < 1:
        raise ValueError(f"pool grid must be >= 1, got {grid}")
    if h < grid or w < grid:
        raise ShapeError(f"pool grid {grid} exceeds spatial dims {h}x{w}")
    return n, c, h, w


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW batch, returning (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype),)

    return _make(out, (x,), bwd, "global_avg_pool")
