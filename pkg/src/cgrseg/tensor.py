"""Dense rank-4 tensors with hand-written reverse-mode gradients.

Every value in the library is a ``Tensor``: a float64 array of shape
(batch, channels, rows, cols).  Vectors and matrices are stored as
degenerate rank-4 tensors, e.g. a per-channel vector is (1, C, 1, 1) and
an M x K matrix is (1, M, K, 1).

Ops are plain functions.  When a ``Tape`` is active they record a node
with a closure that maps the output gradient to input gradients;
``backward(tape, loss)`` replays the nodes in reverse and populates the
``grad`` buffer of every tensor the tape touched.  Without an active
tape the same functions are pure forward computations.

All ops are deterministic and, in checked mode (the default), raise
``NumericsError`` as soon as an op produces a NaN or Inf.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Rng",
    "Tape",
    "NumericsError",
    "backward",
    "set_checked",
    "checked_enabled",
    "unchecked",
    "add_broadcast",
    "mul_hadamard",
    "scale",
    "matmul",
    "transpose_mat",
    "conv2d",
    "avg_pool2d",
    "pool_rows",
    "pool_cols",
    "batch_norm",
    "layer_norm",
    "relu",
    "sigmoid",
    "softmax",
    "upsample_bilinear",
    "concat_channels",
    "split_channels",
    "concat_batch",
    "take_batch",
    "reshape",
    "sum_all",
    "record",
]


class NumericsError(RuntimeError):
    """An op produced NaN/Inf while checked mode was enabled."""


_CHECKED = True


def set_checked(enabled: bool) -> None:
    """Globally enable/disable NaN/Inf detection on op outputs."""
    global _CHECKED
    _CHECKED = bool(enabled)


def checked_enabled() -> bool:
    return _CHECKED


@contextlib.contextmanager
def unchecked():
    """Temporarily disable NaN/Inf checking (benchmark path)."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = False
    try:
        yield
    finally:
        _CHECKED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op}: produced non-finite values")


class Tensor:
    """A (batch, channels, rows, cols) float64 array with an optional grad slot.

    ``data`` is row-major and owns its storage; ops never mutate an
    input's data (batch-norm running buffers are explicitly documented
    state and are the one exception).  ``grad``, when populated by
    ``backward``, always matches ``data`` in shape.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, copy: bool = True):
        if copy:
            arr = np.array(data, dtype=np.float64, order="C")
        else:
            arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor requires 4 dims, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int) -> "Tensor":
        return cls(np.zeros((n, c, h, w)), copy=False)

    @classmethod
    def full(cls, dims: Sequence[int], value: float) -> "Tensor":
        return cls(np.full(tuple(dims), float(value)), copy=False)

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), float(value)), copy=False)

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() on tensor of dims {self.dims}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data, copy=True)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"

    # Light operator sugar over the broadcast ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add_broadcast(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul_hadamard(self, other)


# ---------------------------------------------------------------------------
# Deterministic RNG (splitmix64)
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 output mix on uint64 arrays; wraps mod 2^64.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 stream; identical seeds give bit-identical sequences."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def _raw(self, n: int) -> np.ndarray:
        # Vectorized: element k of the stream is mix(state + (k+1)*GOLDEN),
        # bit-identical to n sequential next_u64() calls.
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
            out = _mix64(idx + np.uint64(self.state))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return out

    def uniform(self, shape: Sequence[int] | int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Uniform float64 draws in [lo, hi)."""
        if isinstance(shape, int):
            shape = (shape,)
        n = int(np.prod(shape)) if len(shape) else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (lo + (hi - lo) * u).reshape(shape)

    def below(self, bound: int) -> int:
        """Integer in [0, bound); modulo bias is negligible for small bounds."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def spawn(self, tag: int) -> "Rng":
        """Derive an independent stream keyed by (state, tag)."""
        mixer = Rng((self.state + (int(tag) & _MASK64)) & _MASK64)
        mixer.next_u64()
        return Rng(mixer.next_u64())


def kaiming_uniform(rng: Rng, dims: Sequence[int], fan_in: int) -> Tensor:
    """Kaiming-uniform fan-in init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(tuple(dims), -bound, bound), copy=False)


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of op nodes for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(tape, loss)``.  Single-threaded; one backward per tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> None:
        self.nodes.append(_Node(out, inputs, bwd))


def record(out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    """Record a custom op node on the active tape (no-op without one).

    ``bwd(gout)`` must return one gradient array (or None) per input.
    """
    if _TAPE_STACK:
        _TAPE_STACK[-1].record(out, inputs, bwd)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the tape touched.

    The loss must be a (1,1,1,1) tensor produced by this tape.  Tensors
    on the tape that do not reach the loss get zero grads.
    """
    if loss.dims != (1, 1, 1, 1):
        raise ValueError(f"loss must have dims (1,1,1,1), got {loss.dims}")
    if not tape.nodes:
        raise ValueError("backward on an empty tape (no forward recorded)")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not produced by this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    stored = {id(arr) for arr in grads.values()}  # array ids held in grads
    consumed: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        stored.discard(id(gout))
        consumed[id(node.out)] = gout
        gins = node.bwd(gout)
        for t, g in zip(node.inputs, gins):
            if g is None:
                continue
            acc = grads.get(id(t))
            if acc is None:
                # Stored arrays must be unique owning buffers: accumulation
                # is in-place and must never leak through views/aliases.
                if id(g) in stored or g.base is not None or not g.flags.owndata:
                    g = g.copy()
                grads[id(t)] = g
                stored.add(id(g))
            else:
                acc += g

    for node in tape.nodes:
        for t in node.inputs + (node.out,):
            g = grads.get(id(t))
            if g is None:
                g = consumed.get(id(t))
            t.grad = g if g is not None else np.zeros_like(t.data)
    loss.grad = np.ones((1, 1, 1, 1))


# ---------------------------------------------------------------------------
# Broadcast elementwise ops
# ---------------------------------------------------------------------------

def _broadcast_ok(a: tuple, b: tuple) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _unbroadcast(g: np.ndarray, dims: tuple) -> np.ndarray:
    axes = tuple(i for i in range(4) if dims[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def add_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with size-1 axes broadcast; grads sum back over them."""
    if not _broadcast_ok(a.dims, b.dims):
        raise ValueError(f"incompatible dims for broadcast: {a.dims} vs {b.dims}")
    out = Tensor(a.data + b.data, copy=False)
    _check_finite(out.data, "add_broadcast")

    def bwd(g):
        return _unbroadcast(g, a.dims), _unbroadcast(g, b.dims)

    return record(out, (a, b), bwd)


def mul_hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product under the same broadcast rules as add."""
    if not _broadcast_ok(a.dims, b.dims):
        raise ValueError(f"incompatible dims for broadcast: {a.dims} vs {b.dims}")
    out = Tensor(a.data * b.data, copy=False)
    _check_finite(out.data, "mul_hadamard")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.dims), _unbroadcast(g * ad, b.dims)

    return record(out, (a, b), bwd)


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply by a python float (not a learnable tensor)."""
    alpha = float(alpha)
    out = Tensor(x.data * alpha, copy=False)
    _check_finite(out.data, "scale")

    def bwd(g):
        return (g * alpha,)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Matrix ops (degenerate rank-4 convention)
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(1,M,K,1) x (1,K,P,1) -> (1,M,P,1) matrix product."""
    na, ma, ka, wa = a.dims
    nb, kb, pb, wb = b.dims
    if na != 1 or wa != 1 or nb != 1 or wb != 1:
        raise ValueError(f"matmul expects (1,M,K,1)x(1,K,P,1), got {a.dims} x {b.dims}")
    if ka != kb:
        raise ValueError(f"matmul inner dims differ: {ka} vs {kb}")
    A = a.data[0, :, :, 0]
    B = b.data[0, :, :, 0]
    out = Tensor((A @ B)[None, :, :, None], copy=False)
    _check_finite(out.data, "matmul")

    def bwd(g):
        G = g[0, :, :, 0]
        return (G @ B.T)[None, :, :, None], (A.T @ G)[None, :, :, None]

    return record(out, (a, b), bwd)


def transpose_mat(x: Tensor) -> Tensor:
    """(1,M,K,1) -> (1,K,M,1)."""
    n, m, k, w = x.dims
    if n != 1 or w != 1:
        raise ValueError(f"transpose_mat expects (1,M,K,1), got {x.dims}")
    out = Tensor(np.ascontiguousarray(x.data[0, :, :, 0].T)[None, :, :, None], copy=False)

    def bwd(g):
        return (np.ascontiguousarray(g[0, :, :, 0].T)[None, :, :, None],)

    return record(out, (x,), bwd)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    """Row-major reshape to another rank-4 shape of equal size."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or int(np.prod(dims)) != x.size:
        raise ValueError(f"cannot reshape {x.dims} to {dims}")
    out = Tensor(x.data.reshape(dims), copy=True)
    src = x.dims

    def bwd(g):
        return (g.reshape(src),)

    return record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) scalar tensor."""
    out = Tensor.scalar(float(x.data.sum()))
    _check_finite(out.data, "sum_all")
    dims = x.dims

    def bwd(g):
        return (np.broadcast_to(g, dims).copy(),)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    *,
    stride=1,
    pad=0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``w`` has dims (Cout, Cin/groups, kh, kw); ``bias`` is (1, Cout, 1, 1).
    ``pad`` is per-axis zero padding, or "same" for odd kernels.  Output
    rows are (H + 2*padH - kh)//strideH + 1 and must be positive.
    """
    n, c, h, wd = x.dims
    cout, cg, kh, kw = w.dims
    sh, sw = _pair(stride)
    if pad == "same":
        if kh % 2 == 0 or kw % 2 == 0 or sh != 1 or sw != 1:
            raise ValueError("pad='same' requires odd kernel and stride 1")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    else:
        ph, pw = _pair(pad)
    if groups < 1 or c % groups != 0 or cout % groups != 0:
        raise ValueError(f"bad groups={groups} for Cin={c}, Cout={cout}")
    if cg != c // groups:
        raise ValueError(f"weight dims {w.dims} do not match Cin/groups={c // groups}")
    if bias is not None and bias.dims != (1, cout, 1, 1):
        raise ValueError(f"bias dims must be (1,{cout},1,1), got {bias.dims}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive conv output {ho}x{wo} for input {h}x{wd}")

    g_ = groups
    cog = cout // g_
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # (n, c, ho, wo, kh, kw)
    # im2col: (groups, cg*kh*kw, n*ho*wo), contiguous for BLAS
    cols = np.ascontiguousarray(
        win.reshape(n, g_, cg, ho, wo, kh, kw).transpose(1, 2, 5, 6, 0, 3, 4)
    ).reshape(g_, cg * kh * kw, n * ho * wo)
    wmat = w.data.reshape(g_, cog, cg * kh * kw)
    out_mat = np.matmul(wmat, cols)  # (groups, cog, n*ho*wo)
    out_arr = np.ascontiguousarray(
        out_mat.reshape(g_, cog, n, ho, wo).transpose(2, 0, 1, 3, 4)
    ).reshape(n, cout, ho, wo)
    if bias is not None:
        out_arr += bias.data
    out = Tensor(out_arr, copy=False)
    _check_finite(out.data, "conv2d")

    hp, wp = h + 2 * ph, wd + 2 * pw
    has_bias = bias is not None

    def bwd(gout):
        gmat = np.ascontiguousarray(
            gout.reshape(n, g_, cog, ho, wo).transpose(1, 2, 0, 3, 4)
        ).reshape(g_, cog, n * ho * wo)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).reshape(cout, cg, kh, kw)
        gcols = np.matmul(wmat.transpose(0, 2, 1), gmat)  # (g, cg*kh*kw, n*ho*wo)
        gc = gcols.reshape(g_, cg, kh, kw, n, ho, wo)
        gxp = np.zeros((n, g_, cg, hp, wp))
        for i in range(kh):
            top = i + sh * ho
            for j in range(kw):
                gxp[:, :, :, i:top:sh, j:j + sw * wo:sw] += gc[:, :, i, j].transpose(2, 0, 1, 3, 4)
        gx = gxp.reshape(n, c, hp, wp)[:, :, ph:ph + h, pw:pw + wd]
        if has_bias:
            gb = gout.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
            return np.ascontiguousarray(gx), gw, gb
        return np.ascontiguousarray(gx), gw

    inputs = (x, w, bias) if has_bias else (x, w)
    return record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor mean pooling."""
    n, c, h, w = x.dims
    f = int(factor)
    if f < 1:
        raise ValueError("factor must be positive")
    if h % f or w % f:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {f}")
    out_arr = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    out = Tensor(out_arr, copy=False)
    inv = 1.0 / (f * f)

    def bwd(g):
        return (np.repeat(np.repeat(g, f, axis=2), f, axis=3) * inv,)

    return record(out, (x,), bwd)


def pool_rows(x: Tensor) -> Tensor:
    """Mean over the column axis -> (N, C, H, 1) axial profile."""
    n, c, h, w = x.dims
    out = Tensor(x.data.mean(axis=3, keepdims=True), copy=False)

    def bwd(g):
        return (np.broadcast_to(g / w, (n, c, h, w)).copy(),)

    return record(out, (x,), bwd)


def pool_cols(x: Tensor) -> Tensor:
    """Mean over the row axis -> (N, C, 1, W) axial profile."""
    n, c, h, w = x.dims
    out = Tensor(x.data.mean(axis=2, keepdims=True), copy=False)

    def bwd(g):
        return (np.broadcast_to(g / h, (n, c, h, w)).copy(),)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    *,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes by biased batch statistics and updates the
    running buffers in place (the library's one documented mutation);
    eval mode uses the running buffers and is a plain affine map.
    """
    n, c, h, w = x.dims
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.dims != (1, c, 1, 1):
            raise ValueError(f"{name} dims must be (1,{c},1,1), got {t.dims}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var
    else:
        mu = running_mean.data
        var = running_var.data
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data, copy=False)
    _check_finite(out.data, "batch_norm")
    gdat = gamma.data
    m = n * h * w

    def bwd(g):
        dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dxhat = g * gdat
        if mode == "eval":
            dx = dxhat * inv
        else:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), bwd)


def layer_norm(v: Tensor, gamma: Tensor, beta: Tensor, *, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis independently at each (n, h, w)."""
    n, c, h, w = v.dims
    if gamma.dims != (1, c, 1, 1) or beta.dims != (1, c, 1, 1):
        raise ValueError(f"layer_norm params must be (1,{c},1,1)")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    mu = v.data.mean(axis=1, keepdims=True)
    var = v.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data, copy=False)
    _check_finite(out.data, "layer_norm")
    gdat = gamma.data

    def bwd(g):
        dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dxhat = g * gdat
        s1 = dxhat.sum(axis=1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
        dx = (inv / c) * (c * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return record(out, (v, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), copy=False)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # Two-branch form avoids overflow in exp for large |x|.
    xd = x.data
    s = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = Tensor(s, copy=False)
    _check_finite(out.data, "sigmoid")

    def bwd(g):
        return (g * s * (1.0 - s),)

    return record(out, (x,), bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-shifted softmax along one axis; outputs sum to 1 along it."""
    if not -4 <= axis < 4:
        raise ValueError(f"axis {axis} out of range for rank-4 tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, copy=False)
    _check_finite(out.data, "softmax")

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, align_corners=False."""
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (align_corners=False); adjoint reuses the same weights."""
    n, c, h, w = x.dims
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    ry = _bilinear_matrix(h, out_h)
    rx = _bilinear_matrix(w, out_w)
    out = Tensor(np.matmul(np.matmul(ry, x.data), rx.T), copy=False)

    def bwd(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Channel / batch concat and split
# ---------------------------------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels of empty list")
    n, _, h, w = xs[0].dims
    for t in xs[1:]:
        tn, _, th, tw = t.dims
        if (tn, th, tw) != (n, h, w):
            raise ValueError(f"concat_channels dims mismatch: {t.dims} vs {xs[0].dims}")
    sizes = [t.dims[1] for t in xs]
    out = Tensor(np.concatenate([t.data for t in xs], axis=1), copy=False)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(sizes)))

    return record(out, tuple(xs), bwd)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    n, c, h, w = x.dims
    sizes = [int(s) for s in sizes]
    if sum(sizes) != c or any(s <= 0 for s in sizes):
        raise ValueError(f"split sizes {sizes} do not partition {c} channels")
    outs = []
    lo = 0
    for s in sizes:
        piece = Tensor(x.data[:, lo:lo + s], copy=True)
        lo_, s_ = lo, s

        def bwd(g, lo_=lo_, s_=s_):
            gx = np.zeros((n, c, h, w))
            gx[:, lo_:lo_ + s_] = g
            return (gx,)

        outs.append(record(piece, (x,), bwd))
        lo += s
    return outs


def concat_batch(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_batch of empty list")
    _, c, h, w = xs[0].dims
    for t in xs[1:]:
        if t.dims[1:] != (c, h, w):
            raise ValueError(f"concat_batch dims mismatch: {t.dims} vs {xs[0].dims}")
    sizes = [t.dims[0] for t in xs]
    out = Tensor(np.concatenate([t.data for t in xs], axis=0), copy=False)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]].copy() for i in range(len(sizes)))

    return record(out, tuple(xs), bwd)


def take_batch(x: Tensor, index: int) -> Tensor:
    """Slice one batch element as a (1, C, H, W) tensor."""
    n, c, h, w = x.dims
    if not 0 <= index < n:
        raise ValueError(f"batch index {index} out of range for N={n}")
    out = Tensor(x.data[index:index + 1], copy=True)

    def bwd(g):
        gx = np.zeros((n, c, h, w))
        gx[index] = g[0]
        return (gx,)

    return record(out, (x,), bwd)
