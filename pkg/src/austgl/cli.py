"""Command-line entry point: ``austgl pretrain|train|eval|predict|synth``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import desk_pretrain_config, desk_train_config, load_config
from .data import generate_synthetic
from .objectives import format_report, write_report
from .train import cmd_eval, cmd_predict, cmd_pretrain, cmd_train

LOG_ENV = "AUSTGL_LOG_LEVEL"


def _add_run_options(p):
    p.add_argument("--config", help="YAML/JSON file overriding the desk preset")
    p.add_argument("--dataset", help="dataset root")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="number of optimisation steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="austgl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining on dataset frames")
    _add_run_options(p)
    p.add_argument("--mask-ratio", type=float)

    p = sub.add_parser("train", help="train the AU detector")
    _add_run_options(p)
    p.add_argument("--init", help="pretrained MAE checkpoint for the encoder")
    p.add_argument("--val-dataset", help="validation dataset root (default: training set)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--no-spatial", action="store_true", help="disable the spatial GCN branch")
    p.add_argument("--no-temporal", action="store_true", help="disable the temporal transformer branch")
    p.add_argument("--no-stgl", action="store_true", help="skip graph learning: features go straight to the head")
    p.add_argument("--freeze-encoder", action="store_true")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--dynamic-graph", dest="dynamic_graph", action="store_true", default=None,
                   help="rebuild the KNN graph in every block (default)")
    g.add_argument("--static-graph", dest="dynamic_graph", action="store_false",
                   help="build the KNN graph once from the AU features")

    p = sub.add_parser("eval", help="per-AU and average F1 of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("predict", help="write per-video prediction CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _run_config(args, mode):
    base = desk_pretrain_config() if mode == "pretrain" else desk_train_config()
    cfg = load_config(args.config, base) if args.config else base
    cfg.mode = mode
    if args.dataset:
        cfg.dataset = args.dataset
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.optimizer.steps = args.steps
    if args.lr is not None:
        cfg.optimizer.lr = args.lr
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if mode == "pretrain":
        if args.mask_ratio is not None:
            cfg.mask_ratio = args.mask_ratio
    else:
        if args.val_dataset:
            cfg.val_dataset = args.val_dataset
        if args.threshold is not None:
            cfg.threshold = args.threshold
        if args.eval_every is not None:
            cfg.eval_every = args.eval_every
        if args.no_spatial:
            cfg.stgl.use_spatial = False
        if args.no_temporal:
            cfg.stgl.use_temporal = False
        if args.no_stgl:
            cfg.use_stgl = False
        if args.freeze_encoder:
            cfg.freeze_encoder = True
        if args.dynamic_graph is not None:
            cfg.stgl.dynamic_graph = args.dynamic_graph
    if not cfg.dataset:
        raise SystemExit("a dataset root is required (--dataset or config 'dataset')")
    return cfg


def main(argv=None):
    logging.basicConfig(level=os.environ.get(LOG_ENV, "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ValueError, OSError) as exc:
        parser.exit(2, f"austgl {args.command}: error: {exc}\n")


def _dispatch(args):
    if args.command == "pretrain":
        cmd_pretrain(_run_config(args, "pretrain"), args.out)
    elif args.command == "train":
        _, history = cmd_train(_run_config(args, "train"), args.out, init=args.init)
        print(f"final training average F1: {history['final_train_f1']:.6f}")
    elif args.command == "eval":
        report = cmd_eval(args.checkpoint, args.dataset, args.threshold)
        sys.stdout.write(format_report(report))
        if args.out:
            write_report(report, args.out)
    elif args.command == "predict":
        paths = cmd_predict(args.checkpoint, args.dataset, args.out, args.threshold)
        print(json.dumps([str(p) for p in paths], indent=1))
    elif args.command == "synth":
        generate_synthetic(Path(args.out), args.videos, args.frames, rng_seed=args.seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
