"""Command line interface: ``vgn <command> ...``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from vgn.checkpoint import load_checkpoint, save_checkpoint
from vgn.data import load_dataset, read_raster, write_dataset, write_prob_png
from vgn.errors import FormatError
from vgn.evaluation import emit_report, pr_curve
from vgn.graph import construct_graph
from vgn.synth import SynthConfig, synth_generate
from vgn.trainer import (PRESETS, TrainConfig, TrainLog, TrainingDiverged, predict,
                         pretrain_cnn, train_vgn)

TRAIN_CONFIG_FILE = "train_config.txt"


def _add_config_flags(p):
    g = p.add_argument_group("training configuration (override preset and --config)")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    g.add_argument("--config", type=Path, help="flat key=value config file")
    for f in fields(TrainConfig):
        default = f.default
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}",
                       metavar=f.type.upper(),
                       help="comma-separated list" if isinstance(default, tuple)
                       else f"default {default!r}")


def _config_from_args(args, base=None):
    if base is None:
        base = TrainConfig.from_strings(PRESETS[args.preset])
    if args.config is not None:
        base = TrainConfig.load(args.config, base)
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(TrainConfig)
                 if getattr(args, f"cfg_{f.name}") is not None}
    return TrainConfig.from_strings(overrides, base)


def _load_train_data(args):
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise SystemExit(f"no samples found under {args.data}")
    return samples


def _save(model, config, out):
    save_checkpoint(model, out)
    config.save(Path(out) / TRAIN_CONFIG_FILE)


def cmd_synth(args):
    cfg = SynthConfig(extent=args.extent, n_samples=args.n_samples,
                      branches=tuple(args.branches), widths=tuple(args.widths),
                      curvature=args.curvature, noise=args.noise, seed=args.seed,
                      prefix=args.prefix)
    samples = synth_generate(cfg)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_pretrain(args):
    config = _config_from_args(args)
    samples = _load_train_data(args)
    with TrainLog(args.log) as log:
        model = pretrain_cnn(samples, config, log=log)
    _save(model, config, args.out)
    print(f"pretrained checkpoint written to {args.out}")


def cmd_train(args):
    config = _config_from_args(args)
    samples = _load_train_data(args)
    if args.init is not None:
        model = load_checkpoint(args.init)
        if model.config != config.model_config():
            raise SystemExit(f"checkpoint architecture {model.config} does not match the "
                             f"configuration {config.model_config()}")
    else:
        log_path = None if args.log is None else Path(args.log).with_suffix(".pretrain.csv")
        with TrainLog(log_path) as log:
            model = pretrain_cnn(samples, config, log=log)
    with TrainLog(args.log) as log:
        model = train_vgn(samples, model, config, log=log)
    _save(model, config, args.out)
    print(f"checkpoint written to {args.out}")


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    stored = Path(args.checkpoint) / TRAIN_CONFIG_FILE
    base = TrainConfig.load(stored) if stored.is_file() else None
    config = _config_from_args(args, base)
    if args.image is not None:
        image = read_raster(args.image)
        items = [(Path(args.image).stem, image, None)]
    else:
        items = [(s.id, s.image, s.mask) for s in load_dataset(args.data, args.split)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, image, mask in items:
        if args.cnn_only:
            prob = model.cnn_prob(image)
        else:
            prob = predict(image, model, config.thresholds, config.delta, config.edge_mode,
                           config.radius, mask)
        write_prob_png(out / f"{name}.png", prob)
    print(f"wrote {len(items)} probability maps to {out}")


def cmd_construct_graph(args):
    prob = read_raster(args.prob)
    if prob.ndim == 3:
        prob = prob[:, :, 0]
    g = construct_graph(prob, args.threshold, args.delta, args.edge_mode, args.radius)
    g.save(args.out)
    print(f"graph with {g.n} vertices and {len(g.edges)} edges written to {args.out}")


def cmd_eval(args):
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise SystemExit(f"no samples found under {args.data}")
    curves = {}
    for spec in args.pred:
        method, _, folder = spec.rpartition("=")
        method = method or Path(folder).name
        preds = []
        for s in samples:
            matches = sorted(Path(folder).glob(f"{s.id}.*"))
            if not matches:
                raise SystemExit(f"no prediction for {s.id!r} in {folder}")
            p = read_raster(matches[0])
            preds.append(p[:, :, 0] if p.ndim == 3 else p)
        curves[method] = pr_curve(preds, [s.gt for s in samples], [s.mask for s in samples])
    emit_report(curves, args.out, plot=not args.no_plot)
    for method, c in curves.items():
        print(f"{method}: AP={c.ap:.4f} maxF1={c.max_f1:.4f}")


def _pair(text):
    a, _, b = text.partition(",")
    return int(a), int(b or a)


def build_parser():
    parser = argparse.ArgumentParser(prog="vgn", description="Vessel graph network tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic vessel dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-samples", type=int, default=5)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--branches", type=_pair, default=(1, 4), help="MIN,MAX")
    p.add_argument("--widths", type=_pair, default=(1, 3), help="MIN,MAX")
    p.add_argument("--curvature", type=float, default=0.2)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="synth")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("pretrain", cmd_pretrain, "pretrain the CNN backbone"),
                                 ("train", cmd_train, "joint VGN training")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--split")
        p.add_argument("--out", required=True, type=Path, help="checkpoint directory")
        p.add_argument("--log", type=Path, help="CSV loss log")
        if name == "train":
            p.add_argument("--init", type=Path,
                           help="pretrained checkpoint (default: pretrain first)")
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="write 16-bit probability maps")
    p.add_argument("--checkpoint", required=True, type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path)
    src.add_argument("--image", type=Path)
    p.add_argument("--split")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--cnn-only", action="store_true", help="output the CNN map only")
    _add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("construct-graph", help="build a vessel graph from a probability map")
    p.add_argument("--prob", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--delta", type=int, default=10)
    p.add_argument("--edge-mode", choices=("skeletal", "geodesic"), default="skeletal")
    p.add_argument("--radius", type=float)
    p.set_defaults(func=cmd_construct_graph)

    p = sub.add_parser("eval", help="PR curves, AP and max F1 against ground truth")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split")
    p.add_argument("--pred", required=True, action="append",
                   help="[METHOD=]DIR of probability maps; repeatable")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (FormatError, ValueError, FileNotFoundError, TrainingDiverged) as exc:
        print(f"vgn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
