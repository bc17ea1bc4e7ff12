"""Command-line entry point mirroring ExtractJob."""

from __future__ import annotations

import argparse
import sys

from .backbone import load_backbone
from .extract import ExtractJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dinoshard",
        description="Convert an image directory into a patch-embedding shard",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--images", required=True, help="input image directory")
    parser.add_argument("--out", required=True, help="output shard path (.adne)")
    parser.add_argument("--masks", default=None, help="optional ground-truth mask directory")
    parser.add_argument("--resize", type=int, default=448,
                        help="square resolution; must be divisible by the patch size (14)")
    parser.add_argument("--device", default="cpu", help="torch device for inference")
    parser.add_argument("--normalize", action="store_true",
                        help="L2-normalize embeddings and flag the shard header")
    parser.add_argument("--batch", type=int, default=8, help="images per forward pass")
    parser.add_argument("--backbone", choices=("dinov2", "projection"), default="dinov2",
                        help="dinov2 needs the pretrained weights; projection is a "
                             "deterministic offline stand-in for plumbing tests")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    job = ExtractJob(
        images_dir=args.images,
        out_path=args.out,
        masks_dir=args.masks,
        resize=args.resize,
        device=args.device,
        normalize=args.normalize,
        batch_size=args.batch,
    )
    try:
        backbone = load_backbone(args.backbone, args.device)
        report = extract(job, backbone)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    print(f"wrote {report.records} records to {args.out} ({report.skipped} skipped)")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
