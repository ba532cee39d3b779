"""Command-line entry point: ``caepl <command> [options]``.

Errors are reported as one line on stderr, ``error code=<code> exit=<n>: <message>``,
and the process exits with the error class's exit code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .config import dump, load_config
from .errors import CaeplError, ConfigError
from .reports import write_curves

COMMANDS = ("train-ae", "train-seg", "evaluate", "params", "search-ae-config", "compare", "curves")


def _parser():
    p = argparse.ArgumentParser(prog="caepl", description="Pre-processing blocks for FCN segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train_ae.lr=0.01 (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant")
        sp.add_argument("--scale", choices=("toy", "full"))
        if out:
            sp.add_argument("--out", help="output directory")

    common(sub.add_parser("train-ae", help="pre-train a denoising autoencoder"))
    common(sub.add_parser("train-seg", help="train an FCN or a CAEPL variant"))
    sp = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--out", help="scores CSV path")
    sp = sub.add_parser("params", help="parameter counts against the reported table")
    common(sp, out=False)
    sp.add_argument("--json", action="store_true")
    sp = sub.add_parser("search-ae-config", help="search autoencoder widths matching target counts")
    sp.add_argument("--targets", type=int, nargs=2, metavar=("TRAINABLE", "NON_TRAINABLE"))
    sp.add_argument("--step", type=int, default=4)
    sp.add_argument("--max-filters", type=int, default=256)
    sp.add_argument("--layers", type=int, nargs="+", default=[3, 4])
    sp.add_argument("--out", help="write the JSON report here")
    sp = sub.add_parser("compare", help="train the comparison matrix over seeds")
    common(sp)
    sp.add_argument("--jobs", type=int, help="parallel seeds")
    sp = sub.add_parser("curves", help="plot accuracy and loss curves from a log CSV")
    sp.add_argument("log")
    sp.add_argument("--out", help="SVG path (default: next to the log)")
    return p


def _config(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.variant:
        cfg["experiment"]["variant"] = args.variant
    if args.scale:
        cfg["experiment"]["scale"] = args.scale
    if getattr(args, "out", None) and args.command in ("train-ae", "train-seg", "compare"):
        cfg["out"] = args.out
    return cfg


def _run(args):
    if args.command == "search-ae-config":
        targets = tuple(args.targets) if args.targets else None
        report = experiment.search_report(targets, layers=tuple(args.layers), step=args.step,
                                          max_filters=args.max_filters)
        text = json.dumps(report, indent=2, sort_keys=True)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text + "\n")
        print(text)
        return 0
    if args.command == "curves":
        out = args.out or str(Path(args.log).with_suffix(".svg"))
        print(write_curves(args.log, out))
        return 0

    cfg = _config(args)
    e = cfg["experiment"]
    if args.command == "params":
        model, report, target = experiment.params_report(e["variant"], e["scale"], cfg)
        if args.json:
            print(json.dumps({"variant": e["variant"], "scale": e["scale"], "counts": report.as_tuple(),
                              "reported": target}, indent=2))
        else:
            print(experiment.format_params(e["variant"], e["scale"], report, target))
        return 0
    if args.command == "evaluate":
        scores = experiment.run_evaluate(cfg, args.checkpoint, args.split, args.out)
        print(json.dumps({k: v for k, v in scores.items() if k != "confusion"}, indent=2))
        return 0

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump(cfg))
    if args.command == "train-ae":
        res = experiment.run_train_ae(cfg, out)
        row = res["log"].best_row()
        print(f"best epoch {row.epoch} val_loss {row.val_loss:.6f} -> {out / 'best.ckpt'}")
    elif args.command == "train-seg":
        res = experiment.run_train_seg(cfg, out)
        s = res["scores"]
        print(f"best epoch {res['log'].best_epoch} mean_iou {s['mean_iou']:.4f} pix_acc {s['pix_acc']:.4f}"
              f" -> {out / 'best.ckpt'}")
    elif args.command == "compare":
        res = experiment.run_compare(cfg, out, args.jobs)
        print(res["path"].read_text(), end="")
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown command {args.command!r}")
    return 0


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except CaeplError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error code={exc.code} exit={exc.exit_code}: {msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
