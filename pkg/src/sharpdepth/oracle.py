"""Exhaustive per-pixel search for the best integer displacement given ground truth."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .sampler import DisplacementField


@dataclass(frozen=True)
class SearchWindow:
    """Offsets range over [-half_w, half_w] x [-half_h, half_h].

    The default 51x51 window is the half-extent-25 reading of a 50x50
    neighborhood.
    """

    half_w: int = 25
    half_h: int = 25

    def __post_init__(self):
        if self.half_w < 0 or self.half_h < 0:
            raise ConfigError("window half-extents must be >= 0", half_w=self.half_w, half_h=self.half_h)

    def offsets(self):
        """All offsets in search priority: smallest norm first, then row-major."""
        offs = [(dy, dx) for dy in range(-self.half_h, self.half_h + 1)
                for dx in range(-self.half_w, self.half_w + 1)]
        return sorted(offs, key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))


def optimal_field(target, pred, window=SearchWindow()):
    """Per-pixel argmin of (target(p) - pred(p + offset))^2 over the window.

    Reads outside the raster are clamped to the border. Ties resolve to the
    smaller offset norm, then to row-major order of (dy, dx); zero offset
    therefore wins whenever it is optimal. Returns (field, refined).
    """
    target = np.asarray(target, dtype=np.float32)
    pred = np.asarray(pred, dtype=np.float32)
    if target.shape != pred.shape:
        raise ShapeError("target and prediction shapes differ", expected=target.shape, got=pred.shape)
    H, W = pred.shape
    half_h = min(window.half_h, H - 1)
    half_w = min(window.half_w, W - 1)
    t64 = target.astype(np.float64)
    rows = np.arange(H)
    cols = np.arange(W)
    best_err = np.full((H, W), np.inf)
    best_dx = np.zeros((H, W), dtype=np.int32)
    best_dy = np.zeros((H, W), dtype=np.int32)
    refined = pred.copy()
    for dy, dx in SearchWindow(half_w, half_h).offsets():
        shifted = pred[np.clip(rows + dy, 0, H - 1)][:, np.clip(cols + dx, 0, W - 1)]
        err = (t64 - shifted) ** 2
        better = err < best_err
        best_err[better] = err[better]
        best_dx[better] = dx
        best_dy[better] = dy
        refined[better] = shifted[better]
    field = DisplacementField(best_dx.astype(np.float32), best_dy.astype(np.float32))
    return field, refined


def mse(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def field_error_profile(field, row):
    """Horizontal displacement along one image row."""
    if not 0 <= row < field.shape[0]:
        raise ConfigError(f"row {row} outside field of height {field.shape[0]}")
    return field.dx[row].copy()


__all__ = ["SearchWindow", "optimal_field", "field_error_profile", "mse"]
