"""Toy-scale experiment harnesses: head comparison, loss and guidance ablations, filter baselines.

Every harness takes its data splits explicitly and returns a plain dict so
the CLI can dump it as JSON. Occlusion-boundary accuracy on toy data is
measured against the exact boundary raster of the sharp target
(``toygen.target_edges``), which marks the pixels on both sides of each
discontinuity.
"""

import numpy as np

from . import filters, metrics, toygen
from .net import NetConfig, TrainConfig, train
from .net.train import as_samples, predict


def toy_splits(seed, n_train, n_test, mode="2d", **kwargs):
    """Disjoint train/test toy sets drawn from two derived seeds."""
    train_set = toygen.make_dataset(toygen.derive_seed(seed, 1), n_train, mode, **kwargs)
    test_set = toygen.make_dataset(toygen.derive_seed(seed, 2), n_test, mode, **kwargs)
    return train_set, test_set


def toy_eps_acc(depth, pair, cap=metrics.OB_CAP):
    return metrics.ob_metrics(depth, gt_edges=toygen.target_edges(pair.target), cap=cap).eps_acc


def summarize(outputs, pairs):
    """Mean |error|, edge-region |error| and (2D only) eps_acc of a list of outputs."""
    mae, edge = [], []
    for out, pair in zip(outputs, pairs):
        err = np.abs(np.asarray(out, dtype=np.float64) - pair.target)
        mae.append(err.mean())
        mask = toygen.edge_mask(pair)
        edge.append(err[mask].mean() if mask.any() else 0.0)
    row = {"mae": float(np.mean(mae)), "edge_mae": float(np.mean(edge))}
    if pairs[0].target.shape[0] > 1:
        row["eps_acc"] = float(np.mean([toy_eps_acc(o, p) for o, p in zip(outputs, pairs)]))
    return row


def range_violations(outputs, pairs, tol=1e-5):
    """Number of outputs leaving [min, max] of their input."""
    bad = 0
    for out, pair in zip(outputs, pairs):
        lo, hi = float(pair.input.min()), float(pair.input.max())
        bad += int(out.min() < lo - tol or out.max() > hi + tol)
    return bad


def run_network(net, pairs):
    samples = as_samples(pairs, net.cfg.guidance_kind)
    return [predict(net, s.input, s.guide)[0] for s in samples]


def train_and_score(train_set, test_set, net_cfg, train_cfg, on_log=None):
    result = train(train_set, net_cfg, train_cfg, on_log=on_log)
    outputs = run_network(result.net, test_set)
    row = summarize(outputs, test_set)
    row["range_violations"] = range_violations(outputs, test_set)
    return result.net, outputs, row


def baseline_row(test_set):
    row = summarize([p.input for p in test_set], test_set)
    row["range_violations"] = 0
    return row


def head_comparison(train_set, test_set, net_cfg, train_cfg, on_log=None):
    """Displacement vs residual head under an identical recipe."""
    report = {"baseline": baseline_row(test_set)}
    for head in ("displacement", "residual"):
        cfg = NetConfig(**{**net_cfg.to_dict(), "head": head})
        _, _, report[head] = train_and_score(train_set, test_set, cfg, train_cfg, on_log)
    return report


def loss_ablation(train_set, test_set, net_cfg, train_cfg, losses=("l1", "l2", "huber", "disparity"),
                  on_log=None):
    rows = {"baseline": baseline_row(test_set)}
    for loss in losses:
        cfg = TrainConfig(**{**train_cfg.to_dict(), "loss": loss})
        _, _, rows[loss] = train_and_score(train_set, test_set, net_cfg, cfg, on_log)
    return rows


def guidance_ablation(train_set, test_set, net_cfg, train_cfg, kinds=("none", "rgb", "gray", "binary_edges"),
                      on_log=None):
    rows = {"baseline": baseline_row(test_set)}
    for kind in kinds:
        cfg = NetConfig(**{**net_cfg.to_dict(), "use_guidance": kind != "none", "guidance_kind": kind})
        _, _, rows[kind] = train_and_score(train_set, test_set, cfg, train_cfg, on_log)
    return rows


def filter_comparison(test_set, methods=("bilateral", "guided"), grid=None):
    """Sweep each filter on the evaluation split and keep its best eps_acc setting.

    Picking parameters on the evaluation split itself favors the filters,
    which makes any margin in favor of a trained network conservative.
    """
    items = [(p.input, p.guide, p) for p in test_set]
    report = {"baseline": baseline_row(test_set)}
    for method in methods:
        best, sweep_report = filters.sweep(method, items, lambda out, p: toy_eps_acc(out, p),
                                           None if grid is None else grid.get(method))
        outputs = [filters.apply_filter(method, p.input, p.guide, best) for p in test_set]
        row = summarize(outputs, test_set)
        row["params"] = {k: getattr(best, k) for k in best.__dataclass_fields__}
        row["sweep"] = sweep_report["rows"]
        report[method] = row
    return report


def format_table(rows, columns=("mae", "edge_mae", "eps_acc")):
    """Fixed-width text table of ``{name: {column: value}}``."""
    present = [c for c in columns if any(c in r for r in rows.values())]
    lines = ["name".ljust(14) + "".join(c.rjust(12) for c in present)]
    for name, row in rows.items():
        cells = "".join((f"{row[c]:12.4f}" if c in row else " " * 12) for c in present)
        lines.append(name.ljust(14) + cells)
    return "\n".join(lines)


__all__ = [
    "toy_splits", "toy_eps_acc", "summarize", "range_violations", "run_network", "train_and_score",
    "baseline_row", "head_comparison", "loss_ablation", "guidance_ablation", "filter_comparison",
    "format_table",
]
