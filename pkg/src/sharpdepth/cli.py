"""Command-line entry point.

Every subcommand accepts ``--config FILE.json`` whose keys are the long flag
names (dashes or underscores); explicit flags override the file. The fully
resolved configuration is written as ``config.json`` next to the outputs.
Progress goes to stderr as JSON lines, results to stdout.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import experiments, filters, metrics, oracle, toygen
from .errors import ConfigError, DataError, SharpDepthError
from .rasterio import read_image, read_pfm, read_pnm, write_pfm, write_pnm
from .sampler import field_to_rgb, load_field, save_field

# ---------------------------------------------------------------------------
# plumbing


def workers():
    value = os.environ.get("DS_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"DS_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("DS_THREADS must be >= 1", got=n)
    return n


def parallel_map(fn, items):
    """Order-preserving map over a thread pool of DS_THREADS workers."""
    n = workers()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def progress(**event):
    print(json.dumps(event, sort_keys=True), file=sys.stderr, flush=True)


def emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def write_config(args, directory):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    write_json(Path(directory) / "config.json", cfg)


def out_dir_of(path):
    """Directory that receives config.json for an output file or directory."""
    path = Path(path)
    return path if path.suffix == "" else path.parent


def read_guide(path):
    """Guide image as (C, H, W) float32 in [0, 1]."""
    if path is None:
        return None
    img = read_image(path)
    return img[None] if img.ndim == 2 else np.moveaxis(img, -1, 0)


def read_edges(path):
    img = read_pnm(path) if Path(path).suffix.lower() != ".pfm" else read_pfm(path)
    if img.ndim != 2:
        raise DataError(f"{path}: edge map must be single-channel")
    return img > 0


def pairs_from(args):
    return toygen.load_dataset(args.data)


# ---------------------------------------------------------------------------
# subcommands


def cmd_toygen(args):
    lo, hi = args.sigma
    pairs = toygen.make_dataset(args.seed, args.n, args.mode, sigma_range=(lo, hi), perturb=args.perturb,
                                length=args.length, size=args.size, guidance=args.guidance,
                                texture=args.texture, noise=args.noise)
    toygen.save_dataset(pairs, args.out)
    write_config(args, args.out)
    emit({"out": args.out, "n": len(pairs)})


def cmd_blur(args):
    depth = read_pfm(args.input)
    write_pfm(args.out, toygen.gaussian_blur(depth, args.sigma))
    write_config(args, out_dir_of(args.out))
    emit({"out": args.out})


def cmd_oracle(args):
    pred, gt = read_pfm(args.pred), read_pfm(args.gt)
    if pred.shape != gt.shape:
        raise ConfigError("pred and gt sizes differ", pred=pred.shape, gt=gt.shape)
    field, refined = oracle.optimal_field(gt, pred, oracle.SearchWindow(args.window, args.window))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_field(out / "field.df", field)
    write_pfm(out / "refined.pfm", refined)
    limit = max(float(np.abs(field.to_array()).max()), 1e-12)
    write_pnm(out / "dx.ppm", field_to_rgb(field.dx, limit))
    write_pnm(out / "dy.ppm", field_to_rgb(field.dy, limit))
    stats = {"mse_before": oracle.mse(pred, gt), "mse_after": oracle.mse(refined, gt),
             "window": args.window, "max_displacement": float(field.magnitude().max())}
    write_json(out / "stats.json", stats)
    write_config(args, out)
    emit(stats)


def _net_config(args):
    from .net import NetConfig

    return NetConfig(use_guidance=args.guidance != "none", guidance_kind=args.guidance,
                     encoder_channels=args.channels, head=args.head, input_size=args.crop,
                     kernel=tuple(args.kernel))


def _train_config(args):
    from .net import TrainConfig

    return TrainConfig(lr0=args.lr, weight_decay=args.weight_decay, iters=args.iters, loss=args.loss,
                       huber_delta=args.huber_delta, poly_power=args.poly_power, scales=args.scales,
                       crop=args.crop, seed=args.seed, log_every=args.log_every,
                       val_every=args.val_every, clip_field=args.clip_field,
                       bn_recalibrate=args.bn_recalibrate)


def cmd_train(args):
    from .net import build_network, save_checkpoint, train

    net_cfg, train_cfg = _net_config(args), _train_config(args)
    out = Path(args.out)
    if args.init_only:
        net = build_network(net_cfg, args.seed)
        if args.zero_head:
            net.zero_output()
        save_checkpoint(out, net, train_cfg, iteration=0)
        write_config(args, out.parent)
        emit({"checkpoint": str(out), "iteration": 0})
        return
    dataset = pairs_from(args)
    val = toygen.load_dataset(args.val) if args.val else None
    log_path = out.with_name(out.name + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as log:
        def on_log(entry):
            line = json.dumps(entry, sort_keys=True, default=_jsonable)
            log.write(line + "\n")
            log.flush()
            print(line, file=sys.stderr, flush=True)

        result = train(dataset, net_cfg, train_cfg, val_set=val, on_log=on_log, checkpoint_path=out)
    write_config(args, out.parent)
    emit({"checkpoint": str(out), "interrupted": result.interrupted,
          "final_loss": result.log[-1]["loss"] if result.log else None})
    if result.interrupted:
        raise KeyboardInterrupt


def cmd_refine(args):
    from .net import load_checkpoint, refine

    net, _ = load_checkpoint(args.checkpoint)
    if args.data:
        pairs = pairs_from(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, pair in enumerate(pairs):
            refined, field = refine(pair.input, pair.guide, net)
            write_pfm(out / f"{i:05d}_refined.pfm", refined)
            save_field(out / f"{i:05d}_field.df", field)
            progress(item=i, total=len(pairs))
        write_config(args, out)
        emit({"out": str(out), "n": len(pairs)})
        return
    if not args.input:
        raise ConfigError("refine needs --input or --data")
    depth = read_pfm(args.input)
    refined, field = refine(depth, read_guide(args.guide), net)
    write_pfm(args.out, refined)
    if args.field:
        save_field(args.field, field)
    write_config(args, out_dir_of(args.out))
    emit({"out": args.out, "max_displacement": float(field.magnitude().max())})


def _filter_params(args):
    if args.method == "bilateral":
        return filters.BilateralParams(args.sigma_space, args.sigma_range, args.radius)
    return filters.GuidedParams(args.radius if args.radius is not None else 4, args.epsilon)


def cmd_filter(args):
    if args.data:
        pairs = pairs_from(args)
        if any(p.guide is None for p in pairs):
            raise DataError("filtering a dataset needs guide images (toygen --guidance)")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = {"method": args.method}
        if args.sweep:
            params, sweep_report = filters.sweep(args.method, [(p.input, p.guide, p) for p in pairs],
                                                 lambda d, p: experiments.toy_eps_acc(d, p))
            report["sweep"] = sweep_report
        else:
            params = _filter_params(args)
        report["params"] = {k: getattr(params, k) for k in params.__dataclass_fields__}
        outputs = parallel_map(lambda p: filters.apply_filter(args.method, p.input, p.guide, params), pairs)
        for i, refined in enumerate(outputs):
            write_pfm(out / f"{i:05d}_filtered.pfm", refined)
        write_json(out / "report.json", report)
        write_config(args, out)
        emit(report)
        return
    if not (args.input and args.guide):
        raise ConfigError("filter needs --input and --guide, or --data")
    depth, guide = read_pfm(args.input), read_guide(args.guide)
    params = _filter_params(args)
    write_pfm(args.out, filters.apply_filter(args.method, depth, guide, params))
    write_config(args, out_dir_of(args.out))
    emit({"out": args.out, "params": {k: getattr(params, k) for k in params.__dataclass_fields__}})


def _eval_one(pred, gt, gt_edges, args):
    mask = metrics.eval_crop(args.crop, gt.shape)
    row = metrics.depth_metrics(pred, gt, mask).to_dict()
    thresholds = (args.canny_low, args.canny_high)
    if gt_edges is None:
        gt_edges = metrics.depth_edges(gt, *thresholds, sigma=args.canny_sigma)
    ob = metrics.chamfer_ob(metrics.depth_edges(pred, *thresholds, sigma=args.canny_sigma) & mask,
                            gt_edges & mask, args.cap)
    row.update(ob.to_dict())
    return row


def cmd_eval(args):
    config = {"crop": args.crop, "cap": args.cap, "canny_sigma": args.canny_sigma,
              "canny_thresholds": [args.canny_low, args.canny_high]}
    if args.data:
        pairs = pairs_from(args)
        pred_dir = Path(args.pred_dir) if args.pred_dir else None
        jobs = []
        for i, pair in enumerate(pairs):
            if pred_dir is None:
                pred = pair.input
            else:
                matches = sorted(pred_dir.glob(f"{i:05d}_*.pfm"))
                if not matches:
                    raise DataError(f"no prediction for item {i} in {pred_dir}")
                pred = read_pfm(matches[0])
            edges = toygen.target_edges(pair.target) if args.gt_edges_source == "toy" else None
            jobs.append((pred, pair.target, edges))
        per_image = parallel_map(lambda job: _eval_one(*job, args), jobs)
        config["gt_edges"] = "toy boundary raster" if args.gt_edges_source == "toy" else "canny on gt depth"
    else:
        if not (args.pred and args.gt):
            raise ConfigError("eval needs --pred and --gt, or --data")
        pred, gt = read_pfm(args.pred), read_pfm(args.gt)
        if pred.shape != gt.shape:
            raise ConfigError("pred and gt sizes differ", pred=pred.shape, gt=gt.shape)
        edges = read_edges(args.gt_edges) if args.gt_edges else None
        per_image = [_eval_one(pred, gt, edges, args)]
        config["gt_edges"] = args.gt_edges or "canny on gt depth"
    keys = per_image[0].keys()
    aggregate = {k: float(np.mean([row[k] for row in per_image])) for k in keys}
    report = {"per_image": per_image, "aggregate": aggregate, "config": config}
    if args.out:
        write_json(args.out, report)
        write_config(args, out_dir_of(args.out))
    emit({"aggregate": aggregate, "config": config})


def cmd_viz(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.field:
        field = load_field(args.field)
        limit = args.limit or max(float(np.abs(field.to_array()).max()), 1e-12)
        write_pnm(out / "dx.ppm", field_to_rgb(field.dx, limit))
        write_pnm(out / "dy.ppm", field_to_rgb(field.dy, limit))
        written += ["dx.ppm", "dy.ppm"]
    if args.depth:
        depth = read_pfm(args.depth)
        write_pnm(out / "depth.pgm", metrics.normalize_depth(depth))
        write_pnm(out / "edges.pgm", metrics.depth_edges(depth).astype(np.uint8) * 255)
        written += ["depth.pgm", "edges.pgm"]
    if not written:
        raise ConfigError("viz needs --field and/or --depth")
    write_config(args, out)
    emit({"out": str(out), "files": written})


def cmd_ablate(args):
    from .net import NetConfig, TrainConfig

    mode = "1d" if args.study == "heads" and args.mode is None else (args.mode or "2d")
    kw = {"guidance": mode == "2d", "texture": args.texture, "noise": args.noise} if mode == "2d" else {}
    train_set, test_set = experiments.toy_splits(args.seed, args.n_train, args.n_test, mode, **kw)
    kernel = (1, 3) if mode == "1d" else (3, 3)
    net_cfg = NetConfig(encoder_channels=args.channels, kernel=kernel, input_size=args.crop)
    crop = args.crop if mode == "2d" else test_set[0].target.shape[1]
    train_cfg = TrainConfig(iters=args.iters, lr0=args.lr, loss=args.loss, crop=crop, seed=args.seed,
                            log_every=args.log_every)

    def on_log(entry):
        progress(study=args.study, **entry)

    if args.study == "loss":
        report = experiments.loss_ablation(train_set, test_set, net_cfg, train_cfg, on_log=on_log)
    elif args.study == "heads":
        report = experiments.head_comparison(train_set, test_set, net_cfg, train_cfg, on_log=on_log)
    elif args.study == "guidance":
        report = experiments.guidance_ablation(train_set, test_set, net_cfg, train_cfg, on_log=on_log)
    else:
        report = experiments.filter_comparison(test_set)
        _, _, report["displacement_net"] = experiments.train_and_score(
            train_set, test_set, net_cfg, train_cfg, on_log)
    table = experiments.format_table({k: v for k, v in report.items() if isinstance(v, dict)})
    if args.out:
        write_json(args.out, report)
        write_config(args, out_dir_of(args.out))
    print(table)


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", help="JSON file with default values for this command's flags")
    p.add_argument("--seed", type=int, default=0)


def _add_net_flags(p):
    p.add_argument("--head", choices=["displacement", "residual"], default="displacement")
    p.add_argument("--guidance", choices=["none", "rgb", "gray", "binary_edges"], default="none")
    p.add_argument("--channels", type=int, nargs=4, default=[32, 64, 128, 256])
    p.add_argument("--kernel", type=int, nargs=2, default=[3, 3], help="conv kernel (height width)")
    p.add_argument("--crop", type=int, default=64)


def build_parser():
    parser = argparse.ArgumentParser(prog="sharpdepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toygen", help="generate a toy dataset directory")
    _add_common(p)
    p.add_argument("--mode", choices=["1d", "2d"], default="1d")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--sigma", type=float, nargs=2, default=list(toygen.SIGMA_RANGE), metavar=("LO", "HI"))
    p.add_argument("--perturb", type=float, default=0.0)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--guidance", action="store_true", help="also render an RGB guide per pair")
    p.add_argument("--texture", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("blur", help="Gaussian-blur a PFM depth map")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_blur)

    p = sub.add_parser("oracle", help="exhaustive-search displacement given ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--window", type=int, default=25, help="half-extent of the search window")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("train", help="train a displacement or residual network")
    _add_common(p)
    _add_net_flags(p)
    p.add_argument("--data", help="toy dataset directory")
    p.add_argument("--val", help="validation dataset directory")
    p.add_argument("--loss", choices=["l1", "l2", "huber", "disparity"], default="l1")
    p.add_argument("--huber-delta", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--poly-power", type=float, default=0.9)
    p.add_argument("--scales", type=float, nargs="+", default=[0.75, 1.0, 1.5, 2.0])
    p.add_argument("--clip-field", type=float, default=None)
    p.add_argument("--bn-recalibrate", type=int, default=200)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--val-every", type=int, default=500)
    p.add_argument("--init-only", action="store_true", help="write the initial checkpoint and stop")
    p.add_argument("--zero-head", action="store_true", help="with --init-only: zero the output conv")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="refine depth with a trained displacement network")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input")
    p.add_argument("--guide")
    p.add_argument("--data", help="refine every input of a toy dataset")
    p.add_argument("--field", help="also write the displacement field (DF01)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("filter", help="bilateral or guided filtering baseline")
    _add_common(p)
    p.add_argument("--method", choices=["bilateral", "guided"], required=True)
    p.add_argument("--input")
    p.add_argument("--guide")
    p.add_argument("--data")
    p.add_argument("--sweep", action="store_true", help="grid-search parameters for the best eps_acc")
    p.add_argument("--sigma-space", type=float, default=2.0)
    p.add_argument("--sigma-range", type=float, default=0.1)
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="depth and occlusion-boundary metrics")
    _add_common(p)
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--gt-edges", help="annotated GT boundary raster (PGM/PFM, nonzero = edge)")
    p.add_argument("--data", help="toy dataset directory (GT = targets)")
    p.add_argument("--pred-dir", help="predictions NNNNN_*.pfm for --data; default: the blurred inputs")
    p.add_argument("--gt-edges-source", choices=["toy", "canny"], default="toy")
    p.add_argument("--crop", choices=["full", "eigen"], default="full")
    p.add_argument("--cap", type=float, default=metrics.OB_CAP)
    p.add_argument("--canny-sigma", type=float, default=metrics.CANNY_SIGMA)
    p.add_argument("--canny-low", type=float, default=metrics.CANNY_THRESHOLDS[0])
    p.add_argument("--canny-high", type=float, default=metrics.CANNY_THRESHOLDS[1])
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render fields and depth maps as PPM/PGM")
    _add_common(p)
    p.add_argument("--field")
    p.add_argument("--depth")
    p.add_argument("--limit", type=float, default=None, help="displacement mapped to full color")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="toy-scale comparison tables")
    _add_common(p)
    p.add_argument("study", choices=["loss", "heads", "guidance", "filters"])
    p.add_argument("--mode", choices=["1d", "2d"], default=None)
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--loss", choices=["l1", "l2", "huber", "disparity"], default="l1")
    p.add_argument("--channels", type=int, nargs=4, default=[32, 64, 128, 256])
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--texture", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def _load_config(path):
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in values.items()}


def parse_args(argv=None):
    """Parse flags, layering ``--config`` values under the explicit ones."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if known.config and command in subparsers:
        values = _load_config(known.config)
        sub = subparsers[command]
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(actions))
        if unknown:
            raise ConfigError("unknown keys in config file", keys=unknown)
        for dest in values:
            actions[dest].required = False
        sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None):
    try:
        args = parse_args(argv)
        args.func(args)
    except SharpDepthError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True, default=_jsonable), file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        progress(event="interrupted")
        return 130
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
