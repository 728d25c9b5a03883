"""Dense float64 tensors, taped primitives, and a deterministic RNG.

Every operation here is a pure function from input tensors to a fresh output
tensor. When a `Tape` is active the operation also records a backward rule,
so reverse-mode differentiation (see `autodiff`) can replay the tape. MACs
(multiply-accumulates) of matmul/conv are tallied into any active
`MacCounter`; everything else counts as zero.

All storage is row-major contiguous float64. Broadcasting follows numpy
semantics; gradients are reduced back onto the operand shapes.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.special import erf

from .errors import NumericsError, ShapeError

_TAPES: list["Tape"] = []
_MAC_COUNTERS: list["MacCounter"] = []
_FINITE_CHECKS = [True]


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

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
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # ergonomic sugar; all routed through the taped primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not supported; use mul + rsqrt")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Entries are appended in execution order, so inputs always precede the
    operations that consume them. Used as a context manager::

        with Tape() as tape:
            loss = model(x)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self):
        return len(self.entries)


class MacCounter:
    """Accumulates multiply-accumulate counts of matmul/conv while active."""

    def __init__(self):
        self.macs = 0

    def __enter__(self) -> "MacCounter":
        _MAC_COUNTERS.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _MAC_COUNTERS.pop()
        assert popped is self


class finite_checks:
    """Context manager toggling NaN/Inf detection after each primitive."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self.prev = _FINITE_CHECKS[0]
        _FINITE_CHECKS[0] = self.enabled
        return self

    def __exit__(self, exc_type, exc, tb):
        _FINITE_CHECKS[0] = self.prev


def _add_macs(n: int) -> None:
    for counter in _MAC_COUNTERS:
        counter.macs += n


def _data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _make(out_data: np.ndarray, op: str, inputs: tuple, backward) -> Tensor:
    if _FINITE_CHECKS[0] and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"non-finite values produced by '{op}'")
    out = Tensor(out_data)
    tensors = tuple(t for t in inputs if isinstance(t, Tensor))
    if _TAPES and tensors:
        _TAPES[-1].entries.append((out, tensors, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back onto the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad + bd
    except ValueError:
        raise ShapeError(f"add: shapes {ad.shape} and {bd.shape} do not broadcast") from None

    def bwd(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(g, bd.shape))
        return tuple(grads)

    return _make(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad - bd
    except ValueError:
        raise ShapeError(f"sub: shapes {ad.shape} and {bd.shape} do not broadcast") from None

    def bwd(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(-g, bd.shape))
        return tuple(grads)

    return _make(out, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad * bd
    except ValueError:
        raise ShapeError(f"mul: shapes {ad.shape} and {bd.shape} do not broadcast") from None

    def bwd(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g * bd, ad.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(g * ad, bd.shape))
        return tuple(grads)

    return _make(out, "mul", (a, b), bwd)


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    xd = _data(x)
    out = xd.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, xd.shape).copy(),)

    return _make(out, "sum", (x,), bwd)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    xd = _data(x)
    out = xd.mean(axis=axis, keepdims=keepdims)
    count = xd.size if axis is None else xd.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, xd.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, xd.shape).copy(),)

    return _make(out, "mean", (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    xd = _data(x)
    shape = tuple(shape)
    try:
        out = xd.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {xd.shape} as {shape}") from None

    def bwd(g):
        return (g.reshape(xd.shape),)

    return _make(out, "reshape", (x,), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    xd = _data(x)
    out = np.transpose(xd, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(out, "transpose", (x,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [_data(t) for t in tensors]
    base = datas[0].shape
    for d in datas[1:]:
        if d.ndim != datas[0].ndim:
            raise ShapeError(f"concat: rank mismatch {base} vs {d.shape}")
        for ax in range(d.ndim):
            if ax != (axis % d.ndim) and d.shape[ax] != base[ax]:
                raise ShapeError(f"concat: shapes {base} and {d.shape} differ off-axis")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p for p, t in zip(pieces, tensors) if isinstance(t, Tensor))

    return _make(out, "concat", tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    xd = _data(x)
    index = [slice(None)] * xd.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = xd[index].copy()

    def bwd(g):
        gx = np.zeros_like(xd)
        gx[index] = g
        return (gx,)

    return _make(out, "slice", (x,), bwd)


def broadcast_to(x: Tensor, shape) -> Tensor:
    xd = _data(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(xd, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {xd.shape} to {shape}") from None

    def bwd(g):
        return (_unbroadcast(g, xd.shape),)

    return _make(out, "broadcast", (x,), bwd)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product [..., M, K] @ [..., K, P] -> [..., M, P].

    Leading batch extents broadcast by equality or 1. Counts M*K*P MACs per
    output matrix.
    """
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {ad.shape} @ {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: batch extents do not broadcast: {ad.shape} @ {bd.shape}") from None
    _add_macs(out.size * ad.shape[-1])

    def bwd(g):
        grads = []
        if isinstance(a, Tensor):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            grads.append(_unbroadcast(ga, ad.shape))
        if isinstance(b, Tensor):
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            grads.append(_unbroadcast(gb, bd.shape))
        return tuple(grads)

    return _make(out, "matmul", (a, b), bwd)


def conv2d_grouped(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
                   stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2D convolution with zero padding.

    x: [B, C_in, H, W]; weight: [C_out, C_in/groups, k, k]; bias: [C_out].
    Output [B, C_out, H', W'] with H' = (H + 2*padding - k) // stride + 1.
    Each output group reads only its own input group. Counts
    out_elems * (C_in/groups) * k^2 MACs.
    """
    xd, wd = _data(x), _data(weight)
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be [B, C, H, W], got {xd.shape}")
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ShapeError(f"conv2d: weight must be [C_out, C_in/G, k, k], got {wd.shape}")
    B, cin, H, W = xd.shape
    cout, cg, k, _ = wd.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cg} channels/group but input provides {cin // groups}")
    ho = (H + 2 * padding - k) // stride + 1
    wo = (W + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {k} too large for input {H}x{W} with padding {padding}")
    cog = cout // groups

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xg = xp.reshape(B, groups, cg, xp.shape[2], xp.shape[3])
    cols = np.empty((B, groups, cg, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xg[:, :, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols2 = cols.reshape(B, groups, cg * k * k, ho * wo)
    w2 = wd.reshape(groups, cog, cg * k * k)
    out = np.matmul(w2, cols2).reshape(B, cout, ho, wo)
    _add_macs(B * cout * ho * wo * cg * k * k)

    bd = None
    if bias is not None:
        bd = _data(bias)
        if bd.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bd.shape} != ({cout},)")
        out = out + bd[:, None, None]

    def bwd(g):
        g4 = g.reshape(B, groups, cog, ho * wo)
        gw = np.matmul(g4, np.swapaxes(cols2, -1, -2)).sum(axis=0).reshape(wd.shape)
        gcols = np.matmul(np.swapaxes(w2, -1, -2)[None], g4)
        gc6 = gcols.reshape(B, groups, cg, k, k, ho, wo)
        gxp = np.zeros_like(xg)
        for i in range(k):
            for j in range(k):
                gxp[:, :, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc6[:, :, :, i, j]
        gxp = gxp.reshape(xp.shape)
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None and isinstance(bias, Tensor):
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv2d", inputs, bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Stable softmax along the last axis; rows sum to 1."""
    xd = _data(x)
    if xd.ndim == 0 or xd.shape[-1] == 0:
        raise ShapeError(f"softmax: empty last axis in shape {xd.shape}")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        # Jacobian-vector identity: y * (g - <g, y>) per row
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, "softmax_rows", (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    xd = _data(x)
    if xd.ndim == 0 or xd.shape[-1] == 0:
        raise ShapeError(f"log_softmax: empty last axis in shape {xd.shape}")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax_rows", (x,), bwd)


def relu(x: Tensor) -> Tensor:
    xd = _data(x)
    out = np.maximum(xd, 0.0)

    def bwd(g):
        return (g * (xd > 0),)

    return _make(out, "relu", (x,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = _data(x)
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _make(out, "gelu", (x,), bwd)


def rsqrt(x: Tensor) -> Tensor:
    xd = _data(x)
    out = 1.0 / np.sqrt(xd)

    def bwd(g):
        return (g * (-0.5) * out ** 3,)

    return _make(out, "rsqrt", (x,), bwd)


def gather_last(x: Tensor, indices) -> Tensor:
    """Pick one entry per row of a 2-D tensor: out[i] = x[i, indices[i]]."""
    xd = _data(x)
    idx = np.asarray(indices, dtype=np.int64)
    if xd.ndim != 2 or idx.ndim != 1 or idx.shape[0] != xd.shape[0]:
        raise ShapeError(f"gather_last: expected [B, K] with [B] indices, got {xd.shape}, {idx.shape}")
    rows = np.arange(xd.shape[0])
    out = xd[rows, idx]

    def bwd(g):
        gx = np.zeros_like(xd)
        gx[rows, idx] = g
        return (gx,)

    return _make(out, "gather_last", (x,), bwd)


def dropout(x: Tensor, rate: float, rng: "Rng") -> Tensor:
    """Inverted dropout; draws its mask from `rng`."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    xd = _data(x)
    if rate == 0.0:
        return _make(xd.copy(), "dropout", (x,), lambda g: (g,))
    keep = rng.uniform(xd.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    out = xd * mask

    def bwd(g):
        return (g * mask,)

    return _make(out, "dropout", (x,), bwd)


# ---------------------------------------------------------------------------
# deterministic RNG
# ---------------------------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _key_to_u64(key) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    return int(key) & 0xFFFFFFFFFFFFFFFF


class Rng:
    """Counter-based splitmix64 stream: same seed, same bits, any platform.

    Each draw is a pure function of (seed, counter), so streams are
    reproducible and children forked via `split` are independent.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(self.seed + _GOLDEN * idx)

    def split(self, key) -> "Rng":
        k = np.array([_key_to_u64(key)], dtype=np.uint64)
        child = _mix64(np.array([self.seed], dtype=np.uint64) ^ _mix64(k + _GOLDEN))[0]
        return Rng(int(child))

    def uniform(self, shape=()) -> np.ndarray:
        """i.i.d. uniform [0, 1) samples."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=()) -> np.ndarray:
        """i.i.d. standard normal samples via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = ((self._raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53  # (0, 1]
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = z[:n]
        return z.reshape(shape) if shape else z[0]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        if n > 1:
            raws = self._raw(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(raws[n - 1 - i] % np.uint64(i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_normal(rng: Rng, shape) -> Tensor:
    """Standard-normal tensor drawn from the deterministic stream."""
    return Tensor(rng.normal(tuple(shape)))
