"""Command-line entry points.

Subcommands: synthesize, train-embedder, train-restorer, restore, classify,
evaluate. Options may come from --config files (key=value text or JSON) with
command-line flags taking precedence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .degrade import CATEGORIES, synthesize_dataset
from .descriptor import EmbedderConfig, classify_scene, train_embedders
from .image_io import read_image
from .losses import LossWeights
from .network import NetConfig
from .pipeline import (RestorerTrainConfig, evaluate_dataset, load_embedders,
                       load_restorer, restore_file, save_embedders,
                       train_restorer)
from .serialize import load_config_file


def _apply_config(namespace, parser, argv):
    """Merge --config file values under explicit command-line flags."""
    if getattr(namespace, "config", None) is None:
        return namespace
    values = load_config_file(namespace.config)
    given = {a.split("=")[0].lstrip("-").replace("-", "_")
             for a in argv if a.startswith("--")}
    for key, value in values.items():
        attr = key.replace("-", "_")
        if not hasattr(namespace, attr):
            parser.error(f"unknown config key {key!r} in {namespace.config}")
        if attr not in given:
            setattr(namespace, attr, value)
    return namespace


def _net_config(args) -> NetConfig:
    if args.preset == "desk":
        cfg = NetConfig.desk()
    else:
        cfg = NetConfig()
    if args.widths:
        cfg.widths = tuple(int(v) for v in str(args.widths).split(",")) \
            if isinstance(args.widths, str) else tuple(args.widths)
    return cfg


def cmd_synthesize(args):
    records = synthesize_dataset(
        args.clear_dir, args.out_dir, seed=args.seed,
        per_image_count=args.variants, depth_dir=args.depth_dir,
        threads=args.threads)
    print(f"wrote {len(records)} manifest records to "
          f"{Path(args.out_dir) / 'manifest.jsonl'}")


def cmd_train_embedder(args):
    config = EmbedderConfig.desk() if args.preset == "desk" else EmbedderConfig()
    pair, vocab, log = train_embedders(
        args.manifest, config, epochs=args.epochs, lr=args.lr,
        lr_decay_factor=args.lr_decay_factor,
        lr_decay_interval=args.lr_decay_interval,
        batch_size=args.batch_size, seed=args.seed,
        word_vector_path=args.word_vectors,
        eval_manifest_path=args.eval_manifest)
    save_embedders(args.out, pair, vocab)
    if args.log:
        with open(args.log, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
    tail = [e for e in log if "train_accuracy" in e]
    if tail:
        print(f"final train accuracy {tail[-1]['train_accuracy']:.4f}")
    print(f"saved embedder checkpoint to {args.out}")


def cmd_train_restorer(args):
    _, vocab, _ = load_embedders(args.embedders)
    net_config = _net_config(args)
    cfg = RestorerTrainConfig.desk() if args.preset == "desk" \
        else RestorerTrainConfig()
    cfg.epochs = args.epochs
    cfg.lr = args.lr
    cfg.lr_decay_factor = args.lr_decay_factor
    cfg.lr_decay_interval = args.lr_decay_interval
    cfg.batch_size = args.batch_size
    if args.patch_size:
        cfg.patch_size = args.patch_size
    if args.patch_stride:
        cfg.patch_stride = args.patch_stride
    cfg.seed = args.seed
    cfg.max_steps = args.max_steps
    cfg.checkpoint_interval = args.checkpoint_interval
    weights = LossWeights(alpha1=args.alpha1, alpha2=args.alpha2,
                          alpha3=args.alpha3)
    net = None
    if args.resume:
        net, _ = load_restorer(args.resume)
    _, log = train_restorer(
        args.manifest, vocab, net_config=net_config, train_config=cfg,
        loss_weights=weights, net=net, log_path=args.log,
        checkpoint_path=args.out)
    if log:
        print(f"final loss {log[-1]['total']:.5f} after {log[-1]['step']} steps")
    print(f"saved restorer checkpoint to {args.out}")


def cmd_restore(args):
    net, _ = load_restorer(args.checkpoint)
    pair = vocab = None
    if args.embedders:
        pair, vocab, _ = load_embedders(args.embedders)
    if vocab is None:
        raise SystemExit("restore: --embedders is required (it stores the "
                         "refined text embeddings)")
    info = restore_file(args.input, args.output, net, vocab,
                        text=args.text, pair=pair)
    print(f"restored {info['input']} -> {info['output']} "
          f"(scene: {info['label']})")


def cmd_classify(args):
    pair, vocab, _ = load_embedders(args.embedders)
    img = read_image(args.input)
    label, probs = classify_scene(img, pair, vocab)
    print(f"scene: {label}")
    order = np.argsort(probs)[::-1]
    for i in order:
        print(f"  {vocab.labels[i]:<14s} {probs[i]:.4f}")


def cmd_evaluate(args):
    net, _ = load_restorer(args.checkpoint)
    pair = vocab = None
    if args.embedders:
        pair, vocab, _ = load_embedders(args.embedders)
    if vocab is None:
        raise SystemExit("evaluate: --embedders is required")
    report = evaluate_dataset(args.manifest, net, vocab,
                              text_mode=not args.automatic, pair=pair,
                              out_json=args.json, out_csv=args.csv)
    print(json.dumps(report["overall"], indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onerestore",
        description="Composite-degradation image restoration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value or JSON config file")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synthesize",
                       help="render the 11 composite degradations")
    common(p)
    p.add_argument("clear_dir")
    p.add_argument("out_dir")
    p.add_argument("--variants", type=int, default=1,
                   help="degraded renditions per image per category")
    p.add_argument("--depth-dir", default=None,
                   help="optional directory of matching depth maps")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train-embedder",
                       help="train the scene text/visual embedders")
    common(p)
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("paper", "desk"), default="paper")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-decay-factor", type=float, default=0.5)
    p.add_argument("--lr-decay-interval", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--word-vectors", default=None,
                   help="optional word-vector text file (word v1 .. v300)")
    p.add_argument("--eval-manifest", default=None)
    p.add_argument("--log", default=None, help="JSON-lines training log")
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("train-restorer",
                       help="train the descriptor-conditioned restorer")
    common(p)
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--embedders", required=True,
                   help="embedder checkpoint (frozen text descriptors)")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper")
    p.add_argument("--widths", default=None, help="override channel widths")
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--lr-decay-factor", type=float, default=0.5)
    p.add_argument("--lr-decay-interval", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--patch-stride", type=int, default=None)
    p.add_argument("--alpha1", type=float, default=1.0)
    p.add_argument("--alpha2", type=float, default=0.4)
    p.add_argument("--alpha3", type=float, default=0.05)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--resume", default=None)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train_restorer)

    p = sub.add_parser("restore", help="restore one image")
    common(p)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embedders", required=True)
    p.add_argument("--text", default=None,
                   help="manual scene label such as 'low+haze' "
                        "(omit for automatic classification)")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("classify", help="predict the scene label")
    common(p)
    p.add_argument("input")
    p.add_argument("--embedders", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="PSNR/SSIM over a manifest")
    common(p)
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embedders", required=True)
    p.add_argument("--automatic", action="store_true",
                   help="classify each input instead of using manifest labels")
    p.add_argument("--json", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config(args, parser, argv)
    return args.func(args)


if __name__ == "__main__":
    main()
