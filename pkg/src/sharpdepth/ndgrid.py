"""Minimal reverse-mode differentiation over (channels, height, width) arrays.

Operations executed while a :class:`Tape` is active, and that touch at least
one grid with ``requires_grad``, are recorded in order. ``Tape.backward``
replays them in reverse. Saved context is never modified during backward, so
a tape can be differentiated any number of times with identical results.

Storage defaults to float32. Ops keep the dtype of their inputs, which lets
gradient checks run the very same code in float64. Sums, means and variances
accumulate in float64.
"""

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError

_ids = itertools.count()
_active_tapes = []


class Grid:
    """An array that may participate in differentiation."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "name")

    def __init__(self, value, requires_grad=False, dtype=np.float32, name=None):
        self.value = np.ascontiguousarray(value, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Grid{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar used by the losses
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass(frozen=True)
class Op:
    name: str
    inputs: tuple
    output: Grid
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops run inside the ``with`` block are recorded.
    """

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def backward(self, loss, params=None):
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Grids in ``params`` that the loss does not depend on receive zero
        gradients. Returns a dict mapping node ids to leaf gradients.
        """
        if loss.value.size != 1:
            raise ShapeError("backward requires a scalar loss", expected=(1,), got=loss.shape)
        produced = {op.output.node_id for op in self.ops}
        grads = {loss.node_id: np.ones_like(loss.value)}
        leaves = {}
        for op in reversed(self.ops):
            g_out = grads.pop(op.output.node_id, None)
            if g_out is None:
                continue
            for grid, g_in in zip(op.inputs, op.backward(g_out)):
                if g_in is None or not grid.requires_grad:
                    continue
                if grid.node_id not in produced:
                    leaves[grid.node_id] = grid
                prev = grads.get(grid.node_id)
                grads[grid.node_id] = g_in if prev is None else prev + g_in
        result = {}
        for node_id, grid in leaves.items():
            grid.grad = grads[node_id].astype(grid.dtype, copy=False)
            result[node_id] = grid.grad
        for grid in params or ():
            if grid.node_id not in result:
                grid.grad = np.zeros_like(grid.value)
                result[grid.node_id] = grid.grad
        if loss.requires_grad and loss.node_id not in produced:
            loss.grad = np.ones_like(loss.value)
            result[loss.node_id] = loss.grad
        return result


def backward(tape, loss, params=None):
    return tape.backward(loss, params)


def record(name, inputs, value, backward_fn):
    """Wrap ``value`` in a Grid and record it on the active tape if needed.

    ``backward_fn(g_out)`` must return one gradient (or None) per input.
    """
    tape = _active_tapes[-1] if _active_tapes else None
    needs_grad = tape is not None and any(g.requires_grad for g in inputs)
    out = Grid(value, requires_grad=needs_grad, dtype=value.dtype)
    if needs_grad:
        tape.ops.append(Op(name, tuple(inputs), out, backward_fn))
    return out


def as_grid(x, dtype=None):
    if isinstance(x, Grid):
        return x
    x = np.asarray(x)
    return Grid(x, dtype=dtype or (x.dtype if x.dtype.kind == "f" else np.float32))


def _fsum(a, axis=None, keepdims=False):
    return a.sum(axis=axis, dtype=np.float64, keepdims=keepdims)


# ---------------------------------------------------------------------------
# convolution


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def conv2d(x, w, b=None, stride=1, pad=None):
    """Cross-correlation of a (C, H, W) input with (O, C, kh, kw) weights.

    ``pad`` defaults to half the kernel size on each axis ("same" output at
    stride 1). Zero padding.
    """
    C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError("conv2d input channels do not match weights", expected=Cw, got=C)
    sh, sw = _pair(stride)
    ph, pw = (kh // 2, kw // 2) if pad is None else _pair(pad)
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d kernel larger than padded input", got=(H, W))
    dtype = np.result_type(x.dtype, w.dtype)
    xp = np.pad(x.value.astype(dtype, copy=False), ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :Ho, :Wo]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(C * kh * kw, Ho * Wo)
    w2 = w.value.reshape(O, -1).astype(dtype, copy=False)
    out = w2 @ cols
    if b is not None:
        out += b.value.astype(dtype, copy=False)[:, None]
    out = out.reshape(O, Ho, Wo)

    def backward_fn(g):
        g2 = g.reshape(O, Ho * Wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = _fsum(g2, axis=1).astype(dtype) if b is not None else None
        gcols = (w2.T @ g2).reshape(C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, i, j]
        gx = gxp[:, ph:ph + H, pw:pw + W]
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv2d", inputs, out, backward_fn)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2x2(x):
    """2x2 max pooling, stride 2.

    Odd sizes are replicate-padded at the bottom/right first, so an (H, W)
    input gives (ceil(H/2), ceil(W/2)). Ties go to the first element of the
    block in row-major order.
    """
    C, H, W = x.shape
    Hp, Wp = H + H % 2, W + W % 2
    xp = np.pad(x.value, ((0, 0), (0, Hp - H), (0, Wp - W)), mode="edge")
    Ho, Wo = Hp // 2, Wp // 2
    blocks = xp.reshape(C, Ho, 2, Wo, 2).transpose(0, 1, 3, 2, 4).reshape(C, Ho, Wo, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gblocks = np.zeros((C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=-1)
        gxp = gblocks.reshape(C, Ho, Wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, Hp, Wp)
        gx = gxp[:, :H, :W].copy()
        if Hp > H:
            gx[:, H - 1, :] += gxp[:, H, :W]
        if Wp > W:
            gx[:, :, W - 1] += gxp[:, :H, W]
            if Hp > H:
                gx[:, H - 1, W - 1] += gxp[:, H, W]
        return (gx,)

    return record("maxpool2x2", (x,), out, backward_fn)


def _upsample_matrix(n, dtype):
    """Linear map from n samples to 2n samples, align_corners=False."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def upsample2x_bilinear(x):
    C, H, W = x.shape
    uh = _upsample_matrix(H, x.dtype)
    uw = _upsample_matrix(W, x.dtype)
    out = np.einsum("ih,chw,jw->cij", uh, x.value, uw, optimize=True)

    def backward_fn(g):
        return (np.einsum("ih,cij,jw->chw", uh, g, uw, optimize=True),)

    return record("upsample2x", (x,), out, backward_fn)


def crop(x, height, width):
    """Keep the top-left (height, width) window."""
    C, H, W = x.shape
    if height > H or width > W:
        raise ShapeError("crop larger than input", expected=(height, width), got=(H, W))
    out = x.value[:, :height, :width].copy()

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        gx[:, :height, :width] = g
        return (gx,)

    return record("crop", (x,), out, backward_fn)


def concat(grids, axis=0):
    grids = [as_grid(g) for g in grids]
    dtype = np.result_type(*[g.dtype for g in grids])
    out = np.concatenate([g.value.astype(dtype, copy=False) for g in grids], axis=axis)
    bounds = np.cumsum([0] + [g.shape[axis] for g in grids])

    def backward_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record("concat", tuple(grids), out, backward_fn)


# ---------------------------------------------------------------------------
# activations / normalization


def activation(x, kind="relu", slope=0.01):
    """Elementwise relu or leaky relu.

    The derivative at exactly zero takes the negative branch (0 or ``slope``).
    """
    if kind == "relu":
        neg = 0.0
    elif kind in ("leaky_relu", "leaky"):
        neg = slope
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    positive = x.value > 0
    scale = np.where(positive, 1.0, neg).astype(x.dtype)
    out = x.value * scale

    def backward_fn(g):
        return (g * scale,)

    return record(kind, (x,), out, backward_fn)


def relu(x):
    return activation(x, "relu")


def leaky_relu(x, slope=0.01):
    return activation(x, "leaky_relu", slope)


@dataclass
class BNState:
    """Per-channel batch-norm parameters and running statistics."""

    gamma: Grid
    beta: Grid
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, momentum=0.1, eps=1e-5, name=""):
        return cls(
            gamma=Grid(np.ones(channels), requires_grad=True, name=f"{name}.gamma"),
            beta=Grid(np.zeros(channels), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            momentum=momentum,
            eps=eps,
        )


def batchnorm(x, state, mode="train"):
    """Batch normalization over the spatial axes of a single image.

    With batch size 1, train-mode statistics are the per-channel spatial mean
    and (biased) variance of this image. Running statistics use the unbiased
    variance and are updated in place.
    """
    gamma = state.gamma.value.astype(x.dtype, copy=False)
    beta = state.beta.value.astype(x.dtype, copy=False)
    if mode == "train":
        n = x.value[0].size
        mean = _fsum(x.value, axis=(1, 2)) / n
        centered = x.value.astype(np.float64) - mean[:, None, None]
        var = _fsum(centered * centered, axis=(1, 2)) / n
        unbiased = var * n / (n - 1) if n > 1 else var
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mean
        state.running_var[:] = (1 - m) * state.running_var + m * unbiased
    elif mode == "eval":
        n = None
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
        centered = x.value.astype(np.float64) - mean[:, None, None]
    else:
        raise ConfigError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (centered * inv_std[:, None, None]).astype(x.dtype)
    out = xhat * gamma[:, None, None] + beta[:, None, None]
    inv_std_t = inv_std.astype(x.dtype)

    def backward_fn(g):
        ggamma = _fsum(g * xhat, axis=(1, 2)).astype(x.dtype)
        gbeta = _fsum(g, axis=(1, 2)).astype(x.dtype)
        gxhat = g * gamma[:, None, None]
        if n is None:
            gx = gxhat * inv_std_t[:, None, None]
        else:
            s1 = _fsum(gxhat, axis=(1, 2))[:, None, None]
            s2 = _fsum(gxhat * xhat, axis=(1, 2))[:, None, None]
            gx = (inv_std[:, None, None] / n * (n * gxhat - s1 - xhat * s2)).astype(x.dtype)
        return gx, ggamma, gbeta

    return record("batchnorm", (x, state.gamma, state.beta), out, backward_fn)


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_grid(a), as_grid(b)
    out = a.value + b.value
    return record("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_grid(a), as_grid(b)
    out = a.value - b.value
    return record("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_grid(a), as_grid(b)
    out = a.value * b.value
    return record(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(x, c):
    out = x.value * x.dtype.type(c)
    return record("scale", (x,), out, lambda g: (g * x.dtype.type(c),))


def absolute(x):
    sign = np.sign(x.value)
    return record("abs", (x,), np.abs(x.value), lambda g: (g * sign,))


def square(x):
    return record("square", (x,), x.value * x.value, lambda g: (2 * g * x.value,))


def huber(x, delta=1.0):
    """Elementwise Huber penalty: x^2/2 inside |x| <= delta, delta*(|x| - delta/2) outside."""
    ax = np.abs(x.value)
    inside = ax <= delta
    out = np.where(inside, 0.5 * x.value * x.value, delta * (ax - 0.5 * delta)).astype(x.dtype)
    slope = np.where(inside, x.value, delta * np.sign(x.value)).astype(x.dtype)
    return record("huber", (x,), out, lambda g: (g * slope,))


def reciprocal(x, numerator=1.0):
    out = x.dtype.type(numerator) / x.value
    return record("reciprocal", (x,), out, lambda g: (-g * out / x.value,))


def clamp_min(x, lo):
    keep = x.value >= lo
    out = np.where(keep, x.value, x.dtype.type(lo))
    return record("clamp_min", (x,), out, lambda g: (g * keep,))


def clamp(x, lo, hi):
    keep = (x.value >= lo) & (x.value <= hi)
    out = np.clip(x.value, x.dtype.type(lo), x.dtype.type(hi))
    return record("clamp", (x,), out, lambda g: (g * keep,))


def sum_all(x):
    out = np.asarray(_fsum(x.value), dtype=x.dtype).reshape(1)
    return record("sum", (x,), out, lambda g: (np.full(x.shape, g[0], dtype=x.dtype),))


def mean_all(x):
    n = x.value.size
    out = np.asarray(_fsum(x.value) / n, dtype=x.dtype).reshape(1)
    return record("mean", (x,), out, lambda g: (np.full(x.shape, g[0] / n, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# initialization and checkpoints


def xavier_uniform(shape, rng, dtype=np.float32):
    """Glorot uniform init. For conv weights fan = channels * receptive field."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


MAGIC = b"NDG1"


def save_params(path, named):
    """Write named float32 arrays in NDG1 layout (little-endian)."""
    chunks = [MAGIC]
    for name, arr in named.items():
        arr = np.asarray(arr.value if isinstance(arr, Grid) else arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not an NDG1 parameter file")
    pos, named = 4, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            named[name] = arr.astype(np.float32)
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: corrupt NDG1 file ({exc})") from exc
    return named


__all__ = [
    "Grid", "Tape", "Op", "BNState", "backward", "record", "as_grid",
    "conv2d", "maxpool2x2", "upsample2x_bilinear", "crop", "concat",
    "activation", "relu", "leaky_relu", "batchnorm",
    "add", "sub", "mul", "scale", "absolute", "square", "huber", "reciprocal", "clamp_min", "clamp",
    "sum_all", "mean_all", "xavier_uniform", "save_params", "load_params",
]
