"""Edge-aware filtering baselines: joint bilateral and guided filter."""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class BilateralParams:
    sigma_space: float = 2.0
    sigma_range: float = 0.1
    radius: int = None

    def __post_init__(self):
        if self.radius is None:
            object.__setattr__(self, "radius", max(1, math.ceil(3 * self.sigma_space)))
        if self.sigma_space <= 0 or self.sigma_range <= 0 or self.radius <= 0:
            raise ConfigError("bilateral sigmas and radius must be positive")
        if self.radius < math.ceil(2 * self.sigma_space):
            raise ConfigError("bilateral radius must be >= ceil(2 * sigma_space)")


@dataclass(frozen=True)
class GuidedParams:
    radius: int = 4
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.radius < 1 or self.epsilon <= 0:
            raise ConfigError("guided filter needs radius >= 1 and epsilon > 0")


def to_luminance(guide):
    """(H, W) stays; (3, H, W) or (H, W, 3) RGB becomes Rec.601 luma."""
    g = np.asarray(guide, dtype=np.float64)
    if g.ndim == 2:
        return g
    if g.ndim == 3 and g.shape[0] == 1:
        return g[0]
    if g.ndim == 3 and g.shape[0] == 3:
        return LUMA[0] * g[0] + LUMA[1] * g[1] + LUMA[2] * g[2]
    if g.ndim == 3 and g.shape[-1] == 3:
        return g @ np.array(LUMA)
    raise ShapeError("guide must be gray or RGB", got=g.shape)


def _check(depth, guide):
    if depth.shape != guide.shape:
        raise ShapeError("guide and depth sizes differ", expected=depth.shape, got=guide.shape)


def bilateral(depth, guide, params=BilateralParams()):
    """Joint bilateral filter of ``depth`` steered by ``guide`` intensity."""
    depth = np.asarray(depth, dtype=np.float64)
    lum = to_luminance(guide)
    _check(depth, lum)
    r = params.radius
    H, W = depth.shape
    dp = np.pad(depth, r, mode="edge")
    gp = np.pad(lum, r, mode="edge")
    num = np.zeros((H, W))
    den = np.zeros((H, W))
    inv_s = 1.0 / (2 * params.sigma_space ** 2)
    inv_r = 0.0 if math.isinf(params.sigma_range) else 1.0 / (2 * params.sigma_range ** 2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = math.exp(-(dx * dx + dy * dy) * inv_s)
            g_shift = gp[r + dy:r + dy + H, r + dx:r + dx + W]
            w = ws * np.exp(-((g_shift - lum) ** 2) * inv_r)
            num += w * dp[r + dy:r + dy + H, r + dx:r + dx + W]
            den += w
    return (num / den).astype(np.float32)


def box_sum(img, r):
    """Sum over the (2r+1)^2 window around each pixel via an integral image, replicated border."""
    p = np.pad(np.asarray(img, dtype=np.float64), r, mode="edge")
    ii = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    ii[1:, 1:] = p.cumsum(0).cumsum(1)
    k = 2 * r + 1
    H, W = np.asarray(img).shape
    return ii[k:k + H, k:k + W] - ii[:H, k:k + W] - ii[k:k + H, :W] + ii[:H, :W]


def box_mean(img, r):
    return box_sum(img, r) / (2 * r + 1) ** 2


def guided(depth, guide, params=GuidedParams()):
    """Guided filter: local linear model depth ~ a * I + b over box windows."""
    p = np.asarray(depth, dtype=np.float64)
    I = to_luminance(guide)
    _check(p, I)
    r, eps = params.radius, params.epsilon
    mean_i = box_mean(I, r)
    mean_p = box_mean(p, r)
    cov_ip = box_mean(I * p, r) - mean_i * mean_p
    var_i = np.maximum(box_mean(I * I, r) - mean_i * mean_i, 0.0)
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    return (box_mean(a, r) * I + box_mean(b, r)).astype(np.float32)


DEFAULT_SWEEP = {
    "bilateral": {"sigma_space": [1.0, 2.0, 4.0], "sigma_range": [0.02, 0.05, 0.1, 0.2]},
    "guided": {"radius": [1, 2, 4, 8], "epsilon": [1e-4, 1e-3, 1e-2, 1e-1]},
}


def make_params(method, **kw):
    if method == "bilateral":
        return BilateralParams(**kw)
    if method == "guided":
        return GuidedParams(**kw)
    raise ConfigError(f"unknown filter method {method!r}")


def apply_filter(method, depth, guide, params):
    return bilateral(depth, guide, params) if method == "bilateral" else guided(depth, guide, params)


def sweep(method, items, score_fn, grid=None):
    """Grid search over filter parameters.

    ``items`` is a list of (depth, guide, extra) tuples and ``score_fn(out,
    extra)`` returns a number to minimize (e.g. OB accuracy). Returns
    (best_params, report) where the report lists the mean score per setting.
    """
    grid = grid or DEFAULT_SWEEP[method]
    keys = sorted(grid)
    rows = []
    best = None
    for values in itertools.product(*(grid[k] for k in keys)):
        kw = dict(zip(keys, values))
        params = make_params(method, **kw)
        scores = [score_fn(apply_filter(method, d, g, params), extra) for d, g, extra in items]
        mean = float(np.mean(scores))
        rows.append({"params": kw, "score": mean})
        if best is None or mean < best[1]:
            best = (params, mean)
    return best[0], {"method": method, "grid": grid, "rows": rows, "best_score": best[1]}


__all__ = [
    "BilateralParams", "GuidedParams", "to_luminance", "bilateral", "box_sum", "box_mean",
    "guided", "DEFAULT_SWEEP", "make_params", "apply_filter", "sweep",
]
