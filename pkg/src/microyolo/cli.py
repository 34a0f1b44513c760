"""Command-line entry point tying the toolchain together.

Subcommands: dataset-gen, train, quantize, export, infer, eval,
check-deploy, profile. Exit codes: 0 success, 1 validation failure,
2 runtime error. Diagnostics go to stderr; machine-readable output goes to
files or stdout. Every run with an output directory writes a manifest.json
(fully resolved arguments + versions + seed) next to its outputs, from
which the run can be reproduced.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, check_deployability, count_macs,
                     count_params, parse_model_config)
from .data import (DataError, load_dataset, load_image, preprocess,
                   synth_generate)
from .evaluation import eval_matrix, evaluate
from .head import decode_predictions, nms
from .net import Int8Network, Network, build_quantized_layers
from .profiler import compare_report, footprint, load_measurements
from .serialize import (FormatError, export_quantized, load_checkpoint,
                        load_quantized, save_checkpoint)
from .train import TrainConfig, TrainingDiverged, network_from_checkpoint, train


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors (2 is for runtime errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_manifest(out_dir, command, args):
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": command,
        "arguments": resolved,
        "package_version": __version__,
        "python_version": sys.version.split()[0],
        "numpy_version": np.__version__,
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_restriction(text):
    if text in ("inf", "none", ""):
        return math.inf
    return int(text)


def _load_model(model_path, config_path):
    """Load a .ckpt as a float Network or a .tylq as an Int8Network."""
    model_path = Path(model_path)
    if model_path.suffix == ".tylq":
        if not config_path:
            raise ValueError(
                "quantized blobs need --config with the matching model config")
        cfg_text = Path(config_path).read_text(encoding="utf-8")
        cfg, qlayers = load_quantized(model_path, cfg_text)
        return Int8Network(cfg, qlayers)
    ckpt = load_checkpoint(model_path)
    return network_from_checkpoint(ckpt)


def _cmd_dataset_gen(args):
    if args.out is None:
        raise ValueError("dataset-gen requires --out")
    synth_generate(args.out, n=args.n, classes=args.classes, seed=args.seed,
                   max_objects=args.max_objects, image_size=args.image_size)
    _write_manifest(args.out, "dataset-gen", args)
    print(f"wrote {args.n} images under {args.out}", file=sys.stderr)
    return 0


def _cmd_train(args):
    if args.out is None:
        raise ValueError("train requires --out")
    model_cfg = parse_model_config(Path(args.model).read_text(encoding="utf-8"))
    train_cfg = TrainConfig(
        dataset_dir=args.dataset, out_dir=args.out,
        epochs_float=args.epochs_float, epochs_qat=args.epochs_qat,
        lr0=args.lr, weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        milestones=tuple(float(m) for m in args.milestones.split(",")),
        lr_decay=args.lr_decay, seed=args.seed,
        max_objects=_parse_restriction(args.max_objects),
        checkpoint_every=args.checkpoint_every)
    _write_manifest(args.out, "train", args)

    def progress(row):
        print(f"epoch {row.epoch:4d} [{row.phase:5s}] lr {row.lr:.2e} "
              f"train {row.train_loss:.4f} val {row.val_loss:.4f} "
              f"({row.wall_time_s:.1f}s)", file=sys.stderr)

    result = train(train_cfg, model_cfg, progress=progress)
    from .report import loss_figure
    loss_figure(result.history, Path(args.out) / "loss.png")
    print(result.final_checkpoint)
    return 0


def _cmd_quantize(args):
    if args.out is None:
        raise ValueError("quantize requires --out")
    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    samples, images = load_dataset(args.dataset)
    calib = images[:args.calib_samples]
    if not calib:
        raise ValueError("calibration dataset is empty")
    net.qat = None
    qat = net.start_qat()
    for b0 in range(0, len(calib), 32):
        net.forward_batch(np.stack(calib[b0:b0 + 32]))
    qat.freeze_act_scales()
    meta = dict(ckpt.meta)
    meta["quant"] = {
        "input_scale": 1.0 / 128.0,
        "weight_scales": {str(i): qp.scale
                          for i, qp in qat.weight_scales.items()},
        "act_scales": {str(p): qp.scale for p, qp in qat.act_scales.items()},
    }
    out = Path(args.out)
    if out.is_dir():
        out = out / "calibrated.ckpt"
    save_checkpoint(out, ckpt.config_text, net.params, meta)
    if out.parent != Path("."):
        _write_manifest(out.parent, "quantize", args)
    print(str(out))
    return 0


def _cmd_export(args):
    if args.out is None:
        raise ValueError("export requires --out")
    ckpt = load_checkpoint(args.checkpoint)
    if "quant" not in ckpt.meta:
        raise ValueError("checkpoint has no quantization scales; run the "
                         "quantize subcommand (or QAT training) first")
    net = network_from_checkpoint(ckpt)
    qlayers = build_quantized_layers(net)
    out = Path(args.out)
    if out.is_dir():
        out = out / "model.tylq"
    export_quantized(out, ckpt.config_text, qlayers)
    if out.parent != Path("."):
        _write_manifest(out.parent, "export", args)
    print(str(out))
    return 0


def _cmd_infer(args):
    model = _load_model(args.model, args.config)
    cfg = model.cfg
    for image_path in args.image:
        x = preprocess(load_image(image_path))
        out = model.forward_single(x)
        dets = nms(decode_predictions(out, cfg.grid, cfg.boxes_per_cell,
                                      cfg.num_classes, args.threshold),
                   args.nms)
        print(json.dumps({
            "image": str(image_path),
            "detections": [{"cx": d.cx, "cy": d.cy, "w": d.w, "h": d.h,
                            "class": d.class_id, "score": d.score}
                           for d in dets]}))
    return 0


def _cmd_eval(args):
    model_paths = args.model.split(",")
    models = [(Path(p).name, _load_model(p, args.config)) for p in model_paths]
    restrictions = [_parse_restriction(r) for r in args.restrictions.split(",")]
    samples, images = load_dataset(args.dataset)
    kwargs = dict(conf_threshold=args.threshold, nms_threshold=args.nms,
                  iou_threshold=args.iou, eleven_point=args.eleven_point)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_manifest(out_dir, "eval", args)
    if len(models) == 1 and len(restrictions) == 1:
        result = evaluate(models[0][1], samples, images,
                          restriction=restrictions[0], **kwargs)
        print(result.render())
        if out_dir:
            from .report import pr_curve_data, pr_figure, write_eval_csv
            write_eval_csv(result, out_dir / "report.csv")
            (out_dir / "report.txt").write_text(result.render() + "\n",
                                                encoding="utf-8")
            curves = _pr_curves(models[0][1], samples, images,
                                restrictions[0], args)
            if curves:
                pr_figure(curves, out_dir / "pr.png", args.iou)
    else:
        matrix = eval_matrix(models, samples, images,
                             restrictions=restrictions, **kwargs)
        print(matrix.render())
        if out_dir:
            from .report import write_matrix_csv
            write_matrix_csv(matrix, out_dir / "matrix.csv")
            (out_dir / "matrix.txt").write_text(matrix.render() + "\n",
                                                encoding="utf-8")
    return 0


def _pr_curves(model, samples, images, restriction, args):
    from .report import pr_curve_data
    cfg = model.cfg
    keep = [k for k, s in enumerate(samples) if len(s.boxes) <= restriction]
    dets_per_image, gts_per_image = [], []
    for b0 in range(0, len(keep), 32):
        idx = keep[b0:b0 + 32]
        outs = model.forward_batch(np.stack([images[k] for k in idx]))
        for row, k in enumerate(idx):
            dets = decode_predictions(outs[row], cfg.grid, cfg.boxes_per_cell,
                                      cfg.num_classes, args.threshold)
            dets_per_image.append(nms(dets, args.nms))
            gts_per_image.append(samples[k].boxes)
    raw = pr_curve_data(dets_per_image, gts_per_image, cfg.num_classes,
                        args.iou)
    return {f"class {cls}": rp for cls, rp in raw.items()}


def _cmd_check_deploy(args):
    cfg = parse_model_config(Path(args.model).read_text(encoding="utf-8"))
    report = check_deployability(cfg, profile=args.profile)
    fp = footprint(cfg)
    _, params_total = count_params(cfg)
    _, macs_total = count_macs(cfg)
    text = report.render() + (
        f"\n  parameters:    {params_total:,}"
        f"\n  MACs:          {macs_total:,}"
        f"\n  input bytes:   {fp.input_bytes:,}"
        f"\n  activation RAM estimate: {fp.activation_ram_bytes:,} bytes")
    print(text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "deploy_report.txt").write_text(text + "\n", encoding="utf-8")
        _write_manifest(out_dir, "check-deploy", args)
    return 0 if report.passed else 1


def _cmd_profile(args):
    measurements = load_measurements(args.measurements)
    model_macs = None
    if args.model:
        cfg = parse_model_config(Path(args.model).read_text(encoding="utf-8"))
        _, model_macs = count_macs(cfg)
    macs = args.macs if args.macs else model_macs
    if macs is None:
        raise ValueError("profile needs --model and/or --macs for the MAC count")
    report = compare_report(measurements, macs,
                            model_macs=model_macs if args.macs else None)
    print(report.render())
    if args.out:
        from .report import profile_figure, write_profile_csv
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_profile_csv(report, out_dir / "metrics.csv")
        (out_dir / "metrics.txt").write_text(report.render() + "\n",
                                             encoding="utf-8")
        profile_figure(report, out_dir / "devices.png")
        _write_manifest(out_dir, "profile", args)
    return 0


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="random seed (dimensionless, default 0)")
    common.add_argument("--out", default=None,
                        help="output directory (or file for single-file "
                             "outputs); a manifest.json is written next to it")

    p = _Parser(prog="microyolo",
                description="tiny grid-cell detector toolchain: train, "
                            "quantize, evaluate, profile")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("dataset-gen", parents=[common],
                       help="generate a synthetic shapes dataset")
    g.add_argument("--n", type=int, required=True, help="number of images")
    g.add_argument("--classes", type=int, default=1,
                   help="number of shape classes, 1..3")
    g.add_argument("--max-objects", type=int, default=3,
                   help="maximum objects per image, 1..10")
    g.add_argument("--image-size", type=int, default=88,
                   help="square image side in pixels (default 88)")
    g.set_defaults(func=_cmd_dataset_gen)

    t = sub.add_parser("train", parents=[common],
                       help="train float then quantization-aware")
    t.add_argument("--dataset", required=True,
                   help="dataset directory with annotations.jsonl")
    t.add_argument("--model", required=True, help="model config file")
    t.add_argument("--epochs-float", type=int, default=350,
                   help="float-precision epochs (default 350)")
    t.add_argument("--epochs-qat", type=int, default=300,
                   help="quantization-aware epochs (default 300)")
    t.add_argument("--batch-size", type=int, default=32,
                   help="samples per batch (default 32)")
    t.add_argument("--lr", type=float, default=5e-4,
                   help="starting learning rate (default 5e-4)")
    t.add_argument("--weight-decay", type=float, default=5e-4,
                   help="L2 weight decay coefficient (default 5e-4)")
    t.add_argument("--milestones", default="0.5,0.8",
                   help="learning-rate milestones as fractions of each "
                        "phase (default 0.5,0.8)")
    t.add_argument("--lr-decay", type=float, default=0.1,
                   help="learning-rate decay factor per milestone")
    t.add_argument("--max-objects", default="inf",
                   help="drop training images with more objects ('inf' or int)")
    t.add_argument("--checkpoint-every", type=int, default=50,
                   help="save a checkpoint every N epochs")
    t.set_defaults(func=_cmd_train)

    q = sub.add_parser("quantize", parents=[common],
                       help="calibrate int8 scales for a float checkpoint")
    q.add_argument("--checkpoint", required=True, help="float checkpoint path")
    q.add_argument("--dataset", required=True,
                   help="calibration dataset directory")
    q.add_argument("--calib-samples", type=int, default=128,
                   help="number of calibration images (default 128)")
    q.set_defaults(func=_cmd_quantize)

    e = sub.add_parser("export", parents=[common],
                       help="export a calibrated checkpoint as an int8 blob")
    e.add_argument("--checkpoint", required=True,
                   help="checkpoint with quantization scales")
    e.set_defaults(func=_cmd_export)

    i = sub.add_parser("infer", parents=[common],
                       help="run detection on images")
    i.add_argument("--model", required=True,
                   help="checkpoint (.ckpt) or quantized blob (.tylq)")
    i.add_argument("--config", default=None,
                   help="model config file (required for .tylq models)")
    i.add_argument("--image", nargs="+", required=True,
                   help="input image path(s)")
    i.add_argument("--threshold", type=float, default=0.1,
                   help="detection score threshold in [0,1] (default 0.1)")
    i.add_argument("--nms", type=float, default=0.5,
                   help="NMS IoU threshold in [0,1] (default 0.5)")
    i.set_defaults(func=_cmd_infer)

    v = sub.add_parser("eval", parents=[common],
                       help="mean average precision over a dataset")
    v.add_argument("--model", required=True,
                   help="model path(s); comma-separated list builds a "
                        "restriction matrix")
    v.add_argument("--config", default=None,
                   help="model config file (required for .tylq models)")
    v.add_argument("--dataset", required=True, help="dataset directory")
    v.add_argument("--restrictions", default="inf",
                   help="comma list of max objects per image, e.g. inf,10,5")
    v.add_argument("--threshold", type=float, default=0.1,
                   help="detection score threshold in [0,1] (default 0.1)")
    v.add_argument("--nms", type=float, default=0.5,
                   help="NMS IoU threshold in [0,1] (default 0.5)")
    v.add_argument("--iou", type=float, default=0.5,
                   help="matching IoU threshold in [0,1] (default 0.5)")
    v.add_argument("--eleven-point", action="store_true",
                   help="use 11-point interpolated AP instead of all-point")
    v.set_defaults(func=_cmd_eval)

    c = sub.add_parser("check-deploy", parents=[common],
                       help="check a config against accelerator limits")
    c.add_argument("--model", required=True, help="model config file")
    c.add_argument("--profile", default="max78000",
                   help="deployability profile (max78000)")
    c.set_defaults(func=_cmd_check_deploy)

    f = sub.add_parser("profile", parents=[common],
                       help="deployment metrics from device measurements")
    f.add_argument("--measurements", required=True,
                   help="CSV: device,voltage_v,clock_mhz,latency_ms,power_mw")
    f.add_argument("--model", default=None,
                   help="model config file for the analytic MAC count")
    f.add_argument("--macs", type=int, default=None,
                   help="override MAC count per inference (count)")
    f.set_defaults(func=_cmd_profile)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e} (last good checkpoint: {e.checkpoint_path})",
              file=sys.stderr)
        return 2
    except (ConfigError, DataError, FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
