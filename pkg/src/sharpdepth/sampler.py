"""Depth resampling by a per-pixel displacement field, and the additive residual update.

Coordinates follow image convention: x to the right (columns), y down (rows).
A displacement ``(dx, dy)`` at pixel ``(i, j)`` reads the source at
``(x=j+dx, y=i+dy)``. Out-of-raster reads are clamped to the border, which
keeps every output a convex combination of input values.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .ndgrid import Grid, record


@dataclass
class DisplacementField:
    """Per-pixel shift in pixels; ``dx`` horizontal, ``dy`` vertical."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float32)
        self.dy = np.asarray(self.dy, dtype=np.float32)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ShapeError("dx and dy must be matching 2D arrays", expected=self.dx.shape, got=self.dy.shape)
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise DataError("displacement field contains non-finite values")

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width), np.float32), np.zeros((height, width), np.float32))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        return cls(arr[0], arr[1])

    @property
    def shape(self):
        return self.dx.shape

    def to_array(self):
        return np.stack([self.dx, self.dy])

    def magnitude(self):
        return np.hypot(self.dx, self.dy)


DF_MAGIC = b"DF01"


def save_field(path, field):
    h, w = field.shape
    inter = np.stack([field.dx, field.dy], axis=-1).astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(DF_MAGIC + struct.pack("<II", w, h) + inter.tobytes())


def load_field(path):
    data = Path(path).read_bytes()
    if data[:4] != DF_MAGIC or len(data) < 12:
        raise DataError(f"{path}: not a DF01 displacement file")
    w, h = struct.unpack_from("<II", data, 4)
    vals = np.frombuffer(data, dtype="<f4", offset=12)
    if vals.size != 2 * w * h:
        raise DataError(f"{path}: expected {2 * w * h} floats, found {vals.size}")
    vals = vals.reshape(h, w, 2)
    return DisplacementField(vals[..., 0].copy(), vals[..., 1].copy())


def _bilinear_core(src, xs, ys):
    """Clamped bilinear lookup, evaluated in float64.

    Returns the sampled values together with everything the gradient needs.
    The lower corner is ``floor`` of the clamped coordinate, so at integer
    coordinates the derivative is the right-handed difference.
    """
    H, W = src.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xc = np.clip(xs, 0.0, W - 1)
    yc = np.clip(ys, 0.0, H - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = xc - x0
    wy = yc - y0
    s = src.astype(np.float64, copy=False)
    v00, v01 = s[y0, x0], s[y0, x1]
    v10, v11 = s[y1, x0], s[y1, x1]
    top = (1.0 - wx) * v00 + wx * v01
    bottom = (1.0 - wx) * v10 + wx * v11
    out = (1.0 - wy) * top + wy * bottom
    ctx = dict(
        x0=x0, x1=x1, y0=y0, y1=y1, wx=wx, wy=wy, v00=v00, v01=v01, v10=v10, v11=v11,
        top=top, bottom=bottom,
        inside_x=(xs >= 0) & (xs < W - 1),
        inside_y=(ys >= 0) & (ys < H - 1),
    )
    return out, ctx


def sample_bilinear(src, x, y):
    """Bilinear value of ``src`` at real coordinates ``(x, y)``, border-clamped."""
    src = np.asarray(src)
    if src.ndim == 3:
        src = src[0]
    out, _ = _bilinear_core(src, x, y)
    return float(out) if np.ndim(out) == 0 else out


def _lattice(h, w):
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return ii, jj


def _check_shapes(depth_shape, field_shape):
    if tuple(depth_shape) != tuple(field_shape):
        raise ShapeError("depth and displacement field shapes differ", expected=tuple(depth_shape), got=tuple(field_shape))


def resample_displacement(d_hat, field):
    """``out(p) = d_hat(p + field(p))`` with bilinear interpolation."""
    d_hat = np.asarray(d_hat)
    _check_shapes(d_hat.shape, field.shape)
    ii, jj = _lattice(*d_hat.shape)
    out, _ = _bilinear_core(d_hat, jj + field.dx, ii + field.dy)
    return out.astype(d_hat.dtype if d_hat.dtype.kind == "f" else np.float32)


def resample_displacement_diff(d_hat, field):
    """Differentiable resampling of a (1, H, W) grid by a (2, H, W) field grid.

    Gradients flow to the field through the spatial derivative of the
    bilinear weights, and to ``d_hat`` by scattering the weights back.
    """
    if field.shape[0] != 2:
        raise ShapeError("displacement grid needs exactly 2 channels", expected=2, got=field.shape[0])
    if d_hat.shape[0] != 1:
        raise ShapeError("resampled grid must have a single channel", expected=1, got=d_hat.shape[0])
    _check_shapes(d_hat.shape[1:], field.shape[1:])
    H, W = d_hat.shape[1:]
    ii, jj = _lattice(H, W)
    fv = field.value.astype(np.float64)
    out, c = _bilinear_core(d_hat.value[0], jj + fv[0], ii + fv[1])
    dtype = np.result_type(d_hat.dtype, field.dtype)

    def backward_fn(g):
        g = g[0].astype(np.float64)
        d_dx = (1.0 - c["wy"]) * (c["v01"] - c["v00"]) + c["wy"] * (c["v11"] - c["v10"])
        d_dy = c["bottom"] - c["top"]
        g_field = np.stack([g * d_dx * c["inside_x"], g * d_dy * c["inside_y"]]).astype(field.dtype)
        wx, wy = c["wx"], c["wy"]
        idx = np.concatenate([
            (c["y0"] * W + c["x0"]).ravel(), (c["y0"] * W + c["x1"]).ravel(),
            (c["y1"] * W + c["x0"]).ravel(), (c["y1"] * W + c["x1"]).ravel(),
        ])
        wts = np.concatenate([
            (g * (1 - wy) * (1 - wx)).ravel(), (g * (1 - wy) * wx).ravel(),
            (g * wy * (1 - wx)).ravel(), (g * wy * wx).ravel(),
        ])
        g_src = np.bincount(idx, weights=wts, minlength=H * W).reshape(1, H, W).astype(d_hat.dtype)
        return g_src, g_field

    return record("resample_displacement", (d_hat, field), out[None].astype(dtype), backward_fn)


def apply_residual(d_hat, residual):
    """``out(p) = d_hat(p) + residual(p)``. Unlike resampling, not range-bounded."""
    d_hat = np.asarray(d_hat)
    residual = np.asarray(residual)
    _check_shapes(d_hat.shape, residual.shape)
    return (d_hat.astype(np.float32) + residual.astype(np.float32))


def field_to_rgb(component, limit=None):
    """Diverging color map: positive -> red, negative -> blue, zero -> white.

    ``limit`` sets the magnitude mapped to full saturation (defaults to the
    largest absolute value). Returns (H, W, 3) uint8.
    """
    component = np.asarray(component, dtype=np.float64)
    if limit is None:
        limit = float(np.abs(component).max())
    t = np.zeros_like(component) if limit <= 0 else np.clip(component / limit, -1.0, 1.0)
    pos = np.clip(t, 0, 1)
    neg = np.clip(-t, 0, 1)
    r = 1.0 - neg
    g = 1.0 - pos - neg
    b = 1.0 - pos
    rgb = np.stack([r, g, b], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


__all__ = [
    "DisplacementField", "save_field", "load_field", "sample_bilinear",
    "resample_displacement", "resample_displacement_diff", "apply_residual", "field_to_rgb",
]
