"""Training loop, inference and checkpoints for the refinement networks."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import ndgrid as nd
from ..errors import ConfigError, DataError, NumericError
from ..metrics import edge_accumulate
from ..filters import to_luminance
from ..sampler import DisplacementField, resample_displacement, resample_displacement_diff
from .losses import HUBER_DELTA, LOSSES, loss_eval
from .model import NetConfig, build_network
from .optim import Adam, poly_lr

EDGE_GUIDE_THRESHOLDS = ((0.02, 0.06), (0.05, 0.15), (0.1, 0.3))


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    weight_decay: float = 1e-6
    iters: int = 2000
    batch: int = 1
    loss: str = "l1"
    huber_delta: float = HUBER_DELTA
    poly_power: float = 0.9
    scales: list = field(default_factory=lambda: [0.75, 1.0, 1.5, 2.0])
    crop: int = 64
    seed: int = 0
    log_every: int = 50
    val_every: int = 0
    clip_field: float = None
    bn_recalibrate: int = 200

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive", lr0=self.lr0)
        if not self.iters > 0:
            raise ConfigError("iters must be positive", iters=self.iters)
        if self.batch != 1:
            raise ConfigError("only batch size 1 is supported", batch=self.batch)
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}", choices=list(LOSSES))
        self.scales = [float(s) for s in self.scales]

    def to_dict(self):
        return asdict(self)


@dataclass
class Sample:
    input: np.ndarray
    target: np.ndarray
    guide: np.ndarray = None
    edges: np.ndarray = None


def prepare_guidance(guide, kind):
    """Turn an RGB (3, H, W) or gray guide into the network's guidance channels."""
    if kind == "none" or guide is None:
        return None
    guide = np.asarray(guide, dtype=np.float32)
    if guide.ndim == 2:
        guide = guide[None]
    if kind == "rgb":
        if guide.shape[0] != 3:
            raise DataError("rgb guidance needs a 3-channel image", got=guide.shape)
        return guide
    gray = to_luminance(guide) if guide.shape[0] == 3 else guide[0].astype(np.float64)
    if kind == "gray":
        return gray[None].astype(np.float32)
    if kind == "binary_edges":
        return edge_accumulate(gray, EDGE_GUIDE_THRESHOLDS)[None].astype(np.float32)
    raise ConfigError(f"unknown guidance kind {kind!r}")


def as_samples(dataset, guidance_kind="none"):
    """Accept ToyPairs or (input, target[, guide]) tuples."""
    out = []
    for item in dataset:
        if hasattr(item, "target"):
            inp, tgt, guide = item.input, item.target, getattr(item, "guide", None)
        else:
            inp, tgt, *rest = item
            guide = rest[0] if rest else None
        inp = np.asarray(inp, dtype=np.float32)
        tgt = np.asarray(tgt, dtype=np.float32)
        if inp.shape != tgt.shape or inp.ndim != 2:
            raise DataError("each item needs matching 2D input and target", got=(inp.shape, tgt.shape))
        if guidance_kind != "none" and guide is None:
            raise DataError(f"guidance kind {guidance_kind!r} needs a guide image for every item")
        out.append(Sample(inp, tgt, prepare_guidance(guide, guidance_kind)))
    if not out:
        raise DataError("training set is empty")
    return out


def _resize_nearest(a, h, w):
    H, W = a.shape[-2:]
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return a[..., rows[:, None], cols[None, :]]


def _fit(a, top, left, h, w, pad_mode):
    """Window of size (h, w) at (top, left); negative/overflow ranges are padded."""
    H, W = a.shape[-2:]
    pt, pl = max(0, -top), max(0, -left)
    pb, pr = max(0, top + h - H), max(0, left + w - W)
    if pt or pl or pb or pr:
        widths = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
        a = np.pad(a, widths, mode="edge") if pad_mode == "edge" else np.pad(a, widths)
        top, left = top + pt, left + pl
    return a[..., top:top + h, left:left + w]


def augment(sample, rng, cfg):
    """Random rescale (nearest), then random crop or pad to ``cfg.crop``.

    Only coordinates are scaled; depth values are left as they are. Depth and
    target are replicate-padded, guidance is zero-padded. Height-1 (1D)
    samples keep height 1.
    """
    H, W = sample.input.shape
    s = cfg.scales[int(rng.integers(len(cfg.scales)))] if cfg.scales else 1.0
    h = 1 if H == 1 else max(1, int(round(H * s)))
    w = max(1, int(round(W * s)))
    inp = _resize_nearest(sample.input, h, w)
    tgt = _resize_nearest(sample.target, h, w)
    guide = None if sample.guide is None else _resize_nearest(sample.guide, h, w)
    ch = 1 if H == 1 else cfg.crop
    cw = cfg.crop
    top = int(rng.integers(0, h - ch + 1)) if h > ch else -((ch - h) // 2)
    left = int(rng.integers(0, w - cw + 1)) if w > cw else -((cw - w) // 2)
    inp = _fit(inp, top, left, ch, cw, "edge")
    tgt = _fit(tgt, top, left, ch, cw, "edge")
    if guide is not None:
        guide = _fit(guide, top, left, ch, cw, "zero")
    return Sample(np.ascontiguousarray(inp), np.ascontiguousarray(tgt),
                  None if guide is None else np.ascontiguousarray(guide))


def head_output(net, depth, out, clip_field=None):
    """Combine raw network output with the input depth (both differentiable)."""
    d = nd.Grid(np.asarray(depth)[None], dtype=out.dtype)
    if net.cfg.head == "displacement":
        if clip_field:
            out = nd.clamp(out, -clip_field, clip_field)
        return resample_displacement_diff(d, out)
    scale = float(np.std(np.asarray(depth, dtype=np.float64))) + 1e-6
    return nd.add(d, nd.scale(out, scale))


@dataclass
class TrainResult:
    net: object
    log: list
    interrupted: bool = False


def train(dataset, net_cfg, train_cfg, val_set=None, on_log=None, checkpoint_path=None):
    """Train a displacement or residual network with Adam and the poly schedule.

    ``on_log`` receives one dict per logged iteration. If the loss turns
    non-finite a diagnostic checkpoint is written (when a path is given) and
    NumericError is raised. KeyboardInterrupt stops training early and keeps
    a valid checkpoint.
    """
    samples = as_samples(dataset, net_cfg.guidance_kind)
    val_samples = as_samples(val_set, net_cfg.guidance_kind) if val_set else None
    net = build_network(net_cfg, train_cfg.seed)
    params = net.parameters()
    opt = Adam(params, lr=train_cfg.lr0, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    order = []
    log = []
    interrupted = False
    it = 0
    try:
        for it in range(train_cfg.iters):
            if not order:
                order = list(rng.permutation(len(samples)))[::-1]
            sample = augment(samples[order.pop()], rng, train_cfg)
            lr = poly_lr(train_cfg.lr0, it, train_cfg.iters, train_cfg.poly_power)
            with nd.Tape() as tape:
                out = net(sample.input[None], sample.guide, mode="train")
                pred = head_output(net, sample.input, out, train_cfg.clip_field)
                loss = loss_eval(pred, sample.target[None], train_cfg.loss, train_cfg.huber_delta)
            value = loss.item()
            if not math.isfinite(value):
                if checkpoint_path:
                    save_checkpoint(Path(checkpoint_path).with_suffix(".nan.ndg"), net, train_cfg, it)
                raise NumericError(f"non-finite loss at iteration {it}", iteration=it, loss=value)
            tape.backward(loss, params)
            opt.step(lr)
            last = it + 1 == train_cfg.iters
            if train_cfg.log_every and (it % train_cfg.log_every == 0 or last):
                entry = {"iter": it, "lr": lr, "loss": value}
                if val_samples and train_cfg.val_every and (it % train_cfg.val_every == 0 or last):
                    entry["val"] = evaluate(net, val_samples)
                log.append(entry)
                if on_log:
                    on_log(entry)
    except KeyboardInterrupt:
        interrupted = True
    if not interrupted and train_cfg.bn_recalibrate:
        recalibrate_bn(net, samples[:train_cfg.bn_recalibrate])
    if checkpoint_path:
        save_checkpoint(checkpoint_path, net, train_cfg, it + 1 if not interrupted else it)
    return TrainResult(net, log, interrupted)


def recalibrate_bn(net, samples):
    """Replace the running BN statistics by their plain average over ``samples``.

    The exponential average left by training mostly reflects the last few
    images; eval mode is noticeably more accurate with a cumulative average.
    """
    states = net.bn_states()
    saved = [s.momentum for s in states]
    for s in states:
        s.running_mean[:] = 0
        s.running_var[:] = 0
    for k, sample in enumerate(samples):
        for s in states:
            s.momentum = 1.0 / (k + 1)
        net(sample.input[None], sample.guide, mode="train")
    for s, m in zip(states, saved):
        s.momentum = m


def predict(net, depth, guide=None, clip_field=None):
    """Eval-mode forward. Returns (refined depth, raw head output array)."""
    depth = np.asarray(depth, dtype=np.float32)
    out = net(depth[None], guide, mode="eval")
    pred = head_output(net, depth, out, clip_field)
    return pred.value[0].astype(np.float32), out.value


def refine(depth, guide, net, clip_field=None):
    """Refine a depth map with a displacement network. Returns (refined, field)."""
    if net.cfg.head != "displacement":
        raise ConfigError("refine needs a displacement-head checkpoint", head=net.cfg.head)
    depth = np.asarray(depth, dtype=np.float32)
    guide = prepare_guidance(guide, net.cfg.guidance_kind)
    out = net(depth[None], guide, mode="eval").value
    if clip_field:
        out = np.clip(out, -clip_field, clip_field)
    field = DisplacementField(out[0], out[1])
    return resample_displacement(depth, field), field


def evaluate(net, samples, edge_masks=None):
    """Mean |error| over all pixels (and over edge masks when given)."""
    total, count = 0.0, 0
    edge_total, edge_count = 0.0, 0
    for k, s in enumerate(samples):
        pred, _ = predict(net, s.input, s.guide)
        err = np.abs(pred.astype(np.float64) - s.target)
        total += err.sum()
        count += err.size
        if edge_masks is not None:
            edge_total += err[edge_masks[k]].sum()
            edge_count += int(edge_masks[k].sum())
    result = {"mae": total / count}
    if edge_masks is not None:
        result["edge_mae"] = edge_total / max(edge_count, 1)
    return result


def save_checkpoint(path, net, train_cfg=None, iteration=None, extra=None):
    """Write ``<path>`` (NDG1 parameters) and ``<path>.json`` (config sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nd.save_params(path, net.state_dict())
    meta = {"net_config": net.cfg.to_dict()}
    if train_cfg is not None:
        meta["train_config"] = train_cfg.to_dict()
    if iteration is not None:
        meta["iteration"] = iteration
    if extra:
        meta.update(extra)
    sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path):
    path = Path(path)
    if not sidecar(path).exists():
        raise ConfigError(f"missing config sidecar {sidecar(path)}")
    meta = json.loads(sidecar(path).read_text())
    net = build_network(NetConfig.from_dict(meta["net_config"]))
    net.load_state_dict(nd.load_params(path))
    return net, meta


__all__ = [
    "TrainConfig", "Sample", "prepare_guidance", "as_samples", "augment", "head_output", "train",
    "TrainResult", "recalibrate_bn", "predict", "refine", "evaluate", "save_checkpoint", "load_checkpoint", "sidecar",
]
