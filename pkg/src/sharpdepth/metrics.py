"""Depth accuracy metrics and occlusion-boundary (OB) metrics.

OB accuracy/completeness follow the iBims depth-boundary-error protocol:
edges are extracted with Canny on min-max normalized depth, and each metric
is the mean distance from one edge set to the other, truncated at ``cap``.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, ShapeError
from .toygen import gaussian_blur

OB_CAP = 10.0
CANNY_SIGMA = 1.0
CANNY_THRESHOLDS = (0.05, 0.15)

# Eigen et al. (NIPS 2014) evaluation crop for 640x480 NYUv2 frames, as used
# by the standard evaluation scripts: rows [45, 471), cols [41, 601).
EIGEN_CROP = (45, 471, 41, 601)


@dataclass
class DepthMetrics:
    rel: float
    log10: float
    rmse_lin: float
    rmse_log: float
    sigma1: float
    sigma2: float
    sigma3: float

    def to_dict(self):
        return asdict(self)


@dataclass
class OBMetrics:
    eps_acc: float
    eps_comp: float

    def to_dict(self):
        return asdict(self)


def depth_metrics(pred, gt, mask=None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError("prediction and ground truth shapes differ", expected=gt.shape, got=pred.shape)
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    p, g = pred[mask], gt[mask]
    if g.size == 0:
        raise DataError("evaluation mask is empty")
    if (g <= 0).any():
        raise DataError("ground truth must be positive inside the evaluation mask")
    if (p <= 0).any():
        raise DataError("prediction must be positive inside the evaluation mask")
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        rel=float(np.mean(np.abs(p - g) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        rmse_lin=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        sigma1=float(np.mean(ratio < 1.25)),
        sigma2=float(np.mean(ratio < 1.25 ** 2)),
        sigma3=float(np.mean(ratio < 1.25 ** 3)),
    )


def normalize_depth(d):
    d = np.asarray(d, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if not hi > lo:
        raise DataError("cannot normalize a constant depth map")
    return ((d - lo) / (hi - lo)).astype(np.float32)


def _sobel(img):
    """Unscaled Sobel derivatives (a unit-slope ramp gives 8), replicate border."""
    p = np.pad(img, 1, mode="edge")
    gx = ((p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2]))
    gy = ((p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:]))
    return gx, gy


def canny(img, low=CANNY_THRESHOLDS[0], high=CANNY_THRESHOLDS[1], sigma=CANNY_SIGMA, relative=False):
    """Canny edges of an image in [0, 1].

    Thresholds apply to the unscaled Sobel gradient magnitude, the
    convention of ``skimage.feature.canny`` used by the iBims boundary
    evaluation. With ``relative`` they apply to the magnitude divided by its
    image maximum instead, as in MATLAB's ``edge(I, "canny")``.
    Non-maximum suppression uses four quantized directions; along the
    gradient a pixel must be >= its predecessor and > its successor, so a
    symmetric ridge keeps exactly one pixel. Hysteresis keeps weak pixels
    8-connected to a strong one.
    """
    if not 0 < low < high:
        raise ConfigError("canny thresholds must satisfy 0 < low < high", low=low, high=high)
    img = np.asarray(img, dtype=np.float64)
    smooth = gaussian_blur(img, sigma).astype(np.float64) if sigma > 0 else img
    gx, gy = _sobel(smooth)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(mag.shape, dtype=bool)
    if relative:
        mag = mag / peak
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    mp = np.pad(mag, 1, mode="constant")
    H, W = mag.shape
    # (dy, dx) of the neighbor along the gradient for each sector
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros((H, W), dtype=bool)
    for s, (dy, dx) in steps.items():
        fwd = mp[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
        bwd = mp[1 - dy:1 - dy + H, 1 - dx:1 - dx + W]
        keep |= (sector == s) & (mag > fwd) & (mag >= bwd)
    strong = keep & (mag >= high)
    weak = keep & (mag >= low)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros((H, W), dtype=bool)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels]


def edge_accumulate(img, thresholds, sigma=CANNY_SIGMA, relative=False):
    """Union of Canny edge maps over several (low, high) threshold pairs."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ConfigError("edge_accumulate needs at least one threshold pair")
    acc = None
    for low, high in thresholds:
        e = canny(img, low, high, sigma, relative)
        acc = e if acc is None else acc | e
    return acc


def depth_edges(depth, low=CANNY_THRESHOLDS[0], high=CANNY_THRESHOLDS[1], sigma=CANNY_SIGMA):
    return canny(normalize_depth(depth), low, high, sigma)


def _edt_1d(f):
    """Lower envelope of parabolas: d(q) = min_p (q - p)^2 + f(p)."""
    n = len(f)
    d = [0.0] * n
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    first = None
    for q in range(n):
        if f[q] < math.inf:
            first = q
            break
    if first is None:
        return [math.inf] * n
    v[0] = first
    z[0] = -math.inf
    z[1] = math.inf
    for q in range(first + 1, n):
        fq = f[q]
        if fq == math.inf:
            continue
        while True:
            p = v[k]
            s = ((fq + q * q) - (f[p] + p * p)) / (2 * q - 2 * p)
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = math.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]
    return d


def distance_transform(edges):
    """Exact Euclidean distance from each pixel to the nearest edge pixel.

    Two separable passes of the parabolic lower-envelope transform on squared
    distances. Returns +inf everywhere when there are no edge pixels.
    """
    edges = np.asarray(edges, dtype=bool)
    H, W = edges.shape
    f = np.where(edges, 0.0, np.inf)
    cols = np.empty((H, W))
    for j in range(W):
        cols[:, j] = _edt_1d(f[:, j].tolist())
    out = np.empty((H, W))
    for i in range(H):
        out[i] = _edt_1d(cols[i].tolist())
    return np.sqrt(out)


def _truncated_mean(dist, sources, cap):
    vals = dist[sources]
    vals = vals[vals <= cap]
    return float(vals.mean()) if vals.size else float(cap)


def chamfer_ob(pred_edges, gt_edges, cap=OB_CAP):
    """Truncated Chamfer accuracy (pred -> gt) and completeness (gt -> pred).

    Pixels farther than ``cap`` from the other set are left out of the
    average; an empty contributing set reports ``cap``.
    """
    pred_edges = np.asarray(pred_edges, dtype=bool)
    gt_edges = np.asarray(gt_edges, dtype=bool)
    if pred_edges.shape != gt_edges.shape:
        raise ShapeError("edge maps differ in shape", expected=gt_edges.shape, got=pred_edges.shape)
    return OBMetrics(
        eps_acc=_truncated_mean(distance_transform(gt_edges), pred_edges, cap),
        eps_comp=_truncated_mean(distance_transform(pred_edges), gt_edges, cap),
    )


def ob_metrics(pred_depth, gt_depth=None, gt_edges=None, cap=OB_CAP,
               thresholds=CANNY_THRESHOLDS, sigma=CANNY_SIGMA):
    """OB metrics for a depth prediction; GT edges come from a mask or from GT depth."""
    if gt_edges is None:
        if gt_depth is None:
            raise ConfigError("need gt_depth or gt_edges")
        gt_edges = depth_edges(gt_depth, *thresholds, sigma=sigma)
    return chamfer_ob(depth_edges(pred_depth, *thresholds, sigma=sigma), gt_edges, cap)


def eval_crop(region, shape):
    """Boolean evaluation mask for ``region`` in {"full", "eigen"}."""
    H, W = shape
    if region == "full":
        return np.ones((H, W), dtype=bool)
    if region == "eigen":
        if (H, W) != (480, 640):
            raise ShapeError("the Eigen crop is defined for 640x480 images", expected=(480, 640), got=(H, W))
        top, bottom, left, right = EIGEN_CROP
        mask = np.zeros((H, W), dtype=bool)
        mask[top:bottom, left:right] = True
        return mask
    raise ConfigError(f"unknown evaluation region {region!r}")


__all__ = [
    "DepthMetrics", "OBMetrics", "depth_metrics", "normalize_depth", "canny", "edge_accumulate",
    "depth_edges", "distance_transform", "chamfer_ob", "ob_metrics", "eval_crop",
    "OB_CAP", "CANNY_SIGMA", "CANNY_THRESHOLDS", "EIGEN_CROP",
]
