"""Command line for training, prediction, and embedding export.

    trainharness train   --manifest out/manifest.jsonl --images out --out runs/r0
    trainharness predict --manifest out/manifest.jsonl --images out \
        --checkpoint runs/r0/checkpoint_best.pt --split test --out preds.csv
    trainharness embed   --manifest ... --checkpoint ... --split test --out emb.csv
"""

from __future__ import annotations

import argparse
import json
import sys

from .augment import AugmentationPolicy
from .data import read_manifest
from .predict import export_embeddings, predict
from .train import TrainSchedule, train


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trainharness")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="two-stage training on the manifest's train/val splits")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--images", required=True, help="root directory for image paths")
    tr.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    tr.add_argument("--arch", default="baseline")
    tr.add_argument("--epochs", type=int, default=50)
    tr.add_argument("--ft-epochs", type=int, default=50)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--ft-lr", type=float, default=1e-5)
    tr.add_argument("--batch-size", type=int, default=32)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--no-balance", action="store_true", help="disable minority oversampling")

    for name in ("predict", "embed"):
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True)
        p.add_argument("--images", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--out", required=True)
        p.add_argument("--batch-size", type=int, default=32)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        manifest = read_manifest(args.manifest)
        if args.command == "train":
            schedule = TrainSchedule(
                stage1_epochs=args.epochs,
                stage1_lr=args.lr,
                stage2_epochs=args.ft_epochs,
                stage2_lr=args.ft_lr,
                batch_size=args.batch_size,
                seed=args.seed,
            )
            summary = train(
                manifest,
                args.images,
                args.out,
                schedule=schedule,
                policy=AugmentationPolicy(),
                arch=args.arch,
                balanced=not args.no_balance,
            )
            print(
                json.dumps(
                    {
                        "best_val_acc": summary["best_val_acc"],
                        "epochs_run": summary["epochs_run"],
                        "best_checkpoint": summary["best_checkpoint"],
                    }
                )
            )
        elif args.command == "predict":
            out = predict(args.checkpoint, manifest, args.images, args.split, args.out, args.batch_size)
            print(json.dumps({"predictions": str(out)}))
        else:
            out = export_embeddings(
                args.checkpoint, manifest, args.images, args.split, args.out, args.batch_size
            )
            print(json.dumps({"embeddings": str(out)}))
    except (ValueError, FileNotFoundError) as exc:
        print(f"trainharness: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
