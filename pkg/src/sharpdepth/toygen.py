"""Synthetic sharp/blurred depth pairs.

1D signals are piecewise step/affine/quadratic functions with jumps at the
junctions; 2D images are stacks of convex constant-valued polygons over a
constant background. Inputs are Gaussian-blurred copies of the targets.

All randomness comes from SplitMix64 so that a dataset is a pure function of
its seed and parameters, independent of numpy's generator implementations:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)                     (all mod 2**64)

Uniform floats use the top 53 bits: ``(next() >> 11) * 2**-53``. The stream
for item ``i`` of a dataset seeded with ``s`` is seeded with
``derive_seed(s, i)``, the first output of a SplitMix64 started at
``s ^ (i * 0x9E3779B97F4A7C15)``.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .rasterio import read_pfm, write_pfm, write_pnm

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

VALUE_RANGE = (0.5, 10.0)
JUMP_FLOOR = 0.1
SIGMA_RANGE = (1.0, 4.0)
SEGMENT_KINDS = ("step", "affine", "quadratic")


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next(self):
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo=0.0, hi=1.0):
        return lo + (hi - lo) * ((self.next() >> 11) * 2.0 ** -53)

    def randint(self, lo, hi):
        """Integer in [lo, hi] inclusive."""
        return lo + self.next() % (hi - lo + 1)

    def choice(self, seq):
        return seq[self.next() % len(seq)]


def derive_seed(seed, index):
    return SplitMix64((int(seed) ^ (int(index) * GOLDEN)) & MASK64).next()


# ---------------------------------------------------------------------------
# blur


def gaussian_kernel(sigma):
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(a, k, axis):
    r = len(k) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    ap = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    out = np.zeros(a.shape, dtype=np.float64)
    for t, kv in enumerate(k):
        out += kv * np.take(ap, np.arange(t, t + n), axis=axis)
    return out


def gaussian_blur(src, sigma):
    """Separable Gaussian blur, radius ceil(3 sigma), replicated border.

    Accepts (H, W) or (C, H, W); blurs the last two axes.
    """
    k = gaussian_kernel(sigma)
    src = np.asarray(src)
    out = _convolve_axis(src.astype(np.float64), k, src.ndim - 1)
    out = _convolve_axis(out, k, src.ndim - 2)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# 1D signals


def _segment_lengths(rng, length, segments):
    weights = [rng.uniform(1.0, 2.0) for _ in range(segments)]
    total = sum(weights)
    bounds = [0]
    acc = 0.0
    for w in weights[:-1]:
        acc += w
        bounds.append(int(round(acc / total * length)))
    bounds.append(length)
    return bounds


def gen_signal_1d(seed, length=256, segments=4, kinds=None, jump_floor=JUMP_FLOOR, return_junctions=False):
    """Piecewise signal of ``segments`` pieces, returned as a (1, length) grid.

    Each piece is a constant, a line or a Bernstein quadratic whose control
    values lie in VALUE_RANGE, so the piece stays inside the range. The
    first value of every piece differs from the last value of the previous
    piece by at least ``jump_floor``. ``kinds`` forces the piece types.
    """
    if segments < 2 or length < 16:
        raise ConfigError("need segments >= 2 and length >= 16", segments=segments, length=length)
    if length < 2 * segments:
        raise ConfigError("too many segments for the signal length", segments=segments, length=length)
    if kinds is not None and len(kinds) != segments:
        raise ConfigError("kinds must list one type per segment")
    rng = SplitMix64(seed)
    lo, hi = VALUE_RANGE
    bounds = _segment_lengths(rng, length, segments)
    out = np.zeros(length, dtype=np.float64)
    prev_end = None
    for s in range(segments):
        kind = kinds[s] if kinds is not None else rng.choice(SEGMENT_KINDS)
        start = rng.uniform(lo, hi)
        while prev_end is not None and abs(start - prev_end) < jump_floor:
            start = rng.uniform(lo, hi)
        end = start if kind == "step" else rng.uniform(lo, hi)
        mid = rng.uniform(lo, hi) if kind == "quadratic" else 0.5 * (start + end)
        a, b = bounds[s], bounds[s + 1]
        n = b - a
        t = np.arange(n, dtype=np.float64) / max(n - 1, 1)
        out[a:b] = (1 - t) ** 2 * start + 2 * t * (1 - t) * mid + t ** 2 * end
        prev_end = out[b - 1]
    signal = out.astype(np.float32)[None, :]
    if return_junctions:
        return signal, bounds[1:-1]
    return signal


# ---------------------------------------------------------------------------
# 2D polygons


def _convex_hull(points):
    """Andrew's monotone chain; returns counter-clockwise hull vertices."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def rasterize_convex(hull, h, w):
    """Mask of pixel centers inside a counter-clockwise convex polygon."""
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    inside = np.ones((h, w), dtype=bool)
    if len(hull) < 3:
        return np.zeros((h, w), dtype=bool)
    for (x0, y0), (x1, y1) in zip(hull, hull[1:] + hull[:1]):
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def _distinct_value(rng, used, floor):
    lo, hi = VALUE_RANGE
    while True:
        v = rng.uniform(lo, hi)
        if all(abs(v - u) >= floor for u in used):
            return v


def gen_polygons_2d(seed, h=64, w=64, n_polygons=3, return_masks=False):
    """Background plus ``n_polygons`` convex polygons painted back to front.

    Every polygon covers at least 2% of the image and none covers all of it.
    Values are distinct (pairwise gaps of at least JUMP_FLOOR).
    """
    if n_polygons < 1:
        raise ConfigError("n_polygons must be >= 1", n_polygons=n_polygons)
    rng = SplitMix64(seed)
    used = [_distinct_value(rng, [], JUMP_FLOOR)]
    img = np.full((h, w), used[0], dtype=np.float64)
    masks = []
    size = min(h, w)
    for _ in range(n_polygons):
        while True:
            cx, cy = rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)
            radius = rng.uniform(0.15, 0.4) * size
            k = rng.randint(3, 8)
            pts = []
            for _ in range(k):
                ang = rng.uniform(0.0, 2 * math.pi)
                r = radius * rng.uniform(0.5, 1.0)
                pts.append((cx + r * math.cos(ang), cy + r * math.sin(ang)))
            mask = rasterize_convex(_convex_hull(pts), h, w)
            frac = mask.mean()
            if 0.02 <= frac < 1.0:
                break
        value = _distinct_value(rng, used, JUMP_FLOOR)
        used.append(value)
        img[mask] = value
        masks.append(mask)
    img = img.astype(np.float32)
    return (img, masks) if return_masks else img


def render_guidance(target, seed, texture=0.0, noise=0.0):
    """Synthetic RGB guidance image in [0, 1], shape (3, H, W).

    Every distinct target value gets its own random color, so color edges sit
    exactly on depth edges. ``texture`` adds that many extra color-only
    polygons (edges with no depth counterpart); ``noise`` is the amplitude of
    uniform per-pixel noise.
    """
    target = np.asarray(target)
    rng = SplitMix64(derive_seed(seed, 0xC0105))
    values = np.unique(target)
    rgb = np.zeros((3,) + target.shape, dtype=np.float64)
    if len(values) > 64:
        # smooth 1D content: color ramps with depth
        t = (target - target.min()) / max(float(np.ptp(target)), 1e-6)
        rgb[:] = np.stack([t, 1 - t, 0.5 + 0.5 * np.sin(6.0 * t)])
    else:
        for v in values:
            color = [rng.uniform(0.1, 0.9) for _ in range(3)]
            for c in range(3):
                rgb[c][target == v] = color[c]
    h, w = target.shape
    for _ in range(int(texture)):
        pts = [(rng.uniform(0, w), rng.uniform(0, h)) for _ in range(rng.randint(3, 6))]
        mask = rasterize_convex(_convex_hull(pts), h, w)
        shift = [rng.uniform(-0.15, 0.15) for _ in range(3)]
        for c in range(3):
            rgb[c][mask] += shift[c]
    if noise > 0:
        rgb += noise * (np.array([rng.uniform(-1, 1) for _ in range(rgb.size)]).reshape(rgb.shape))
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ToyPair:
    input: np.ndarray
    target: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)
    guide: np.ndarray = None

    @property
    def shape(self):
        return self.target.shape


def target_edges(target):
    """Boolean mask of pixels adjacent to a value discontinuity of a 2D toy target."""
    t = np.asarray(target)
    edges = np.zeros(t.shape, dtype=bool)
    dv = t[1:, :] != t[:-1, :]
    dh = t[:, 1:] != t[:, :-1]
    edges[1:, :] |= dv
    edges[:-1, :] |= dv
    edges[:, 1:] |= dh
    edges[:, :-1] |= dh
    return edges


def edge_mask(pair, radius=None):
    """Pixels within ``radius`` of a target discontinuity (default ceil(3 sigma))."""
    if radius is None:
        radius = math.ceil(3 * pair.meta.get("sigma", 1.0))
    if pair.meta.get("mode") == "1d":
        core = np.zeros(pair.shape, dtype=bool)
        for j in pair.meta["junctions"]:
            core[0, j - 1:j + 1] = True
    else:
        core = target_edges(pair.target)
    if not core.any():
        return core
    dist = ndimage.distance_transform_edt(~core)
    return dist <= radius


def _low_frequency_noise(rng, shape, amplitude):
    """Smooth noise field with max |value| <= amplitude."""
    h, w = shape
    gh, gw = max(2, h // 16 + 2), max(2, w // 16 + 2)
    if h == 1:
        gh = 1
    coarse = np.array([rng.uniform(-1.0, 1.0) for _ in range(gh * gw)]).reshape(gh, gw)
    ys = np.linspace(0, gh - 1, h) if gh > 1 else np.zeros(h)
    xs = np.linspace(0, gw - 1, w)
    fine = ndimage.map_coordinates(coarse, np.meshgrid(ys, xs, indexing="ij"), order=1, mode="nearest")
    peak = np.abs(fine).max()
    if peak > 0:
        fine *= amplitude / peak
    return fine


def make_pair(seed, mode="1d", sigma=None, sigma_range=SIGMA_RANGE, perturb=0.0, length=256, size=64,
              guidance=False, texture=0, noise=0.0):
    rng = SplitMix64(seed)
    lo, hi = sigma_range
    if sigma is None:
        sigma = rng.uniform(lo, hi)
    meta = {"mode": mode, "sigma": sigma}
    if mode == "1d":
        segments = rng.randint(2, 6)
        target, junctions = gen_signal_1d(rng.next(), length, segments, return_junctions=True)
        meta.update(segments=segments, junctions=[int(j) for j in junctions])
    elif mode == "2d":
        n_polygons = rng.randint(1, 4)
        target = gen_polygons_2d(rng.next(), size, size, n_polygons)
        meta.update(n_polygons=n_polygons)
    else:
        raise ConfigError(f"unknown toy mode {mode!r}")
    blurred = gaussian_blur(target, sigma)
    pair = ToyPair(blurred, target, int(seed), meta)
    if perturb > 0:
        noise_field = _low_frequency_noise(rng, target.shape, perturb)
        away = ~edge_mask(pair)
        pair.input = (blurred.astype(np.float64) + noise_field * away).astype(np.float32)
        meta["perturb"] = perturb
    if guidance:
        pair.guide = render_guidance(target, seed, texture=texture, noise=noise)
    return pair


def make_dataset(seed, n, mode="1d", sigma_range=SIGMA_RANGE, perturb=0.0, **kwargs):
    """``n`` toy pairs; item ``i`` is generated from ``derive_seed(seed, i)``."""
    lo, hi = sigma_range
    if not 0 < lo <= hi:
        raise ConfigError("sigma range must satisfy 0 < lo <= hi", sigma_range=list(sigma_range))
    return [make_pair(derive_seed(seed, i), mode, sigma_range=sigma_range, perturb=perturb, **kwargs) for i in range(n)]


def save_dataset(pairs, directory, extra=None):
    """Write PFM files plus a JSON-lines ``manifest.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, pair in enumerate(pairs):
        stem = f"{i:05d}"
        entry = {"index": i, "seed": pair.seed, "sigma": pair.meta["sigma"],
                 "input": f"{stem}_input.pfm", "target": f"{stem}_target.pfm",
                 "meta": pair.meta}
        write_pfm(directory / entry["input"], pair.input)
        write_pfm(directory / entry["target"], pair.target)
        if pair.guide is not None:
            entry["guide"] = f"{stem}_guide.ppm"
            write_pnm(directory / entry["guide"], np.moveaxis(pair.guide, 0, -1))
        if extra:
            entry.update(extra)
        lines.append(json.dumps(entry, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def load_dataset(directory):
    from .rasterio import read_pnm

    directory = Path(directory)
    pairs = []
    for line in (directory / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        guide = None
        if "guide" in entry:
            guide = np.moveaxis(read_pnm(directory / entry["guide"]), -1, 0).astype(np.float32) / 255.0
        pairs.append(ToyPair(read_pfm(directory / entry["input"]), read_pfm(directory / entry["target"]),
                             entry["seed"], entry.get("meta", {"sigma": entry["sigma"]}), guide))
    return pairs


__all__ = [
    "SplitMix64", "derive_seed", "gaussian_kernel", "gaussian_blur", "gen_signal_1d",
    "gen_polygons_2d", "rasterize_convex", "render_guidance", "ToyPair", "target_edges",
    "edge_mask", "make_pair", "make_dataset", "save_dataset", "load_dataset",
]
