"""Command-line interface: convert and split."""

from __future__ import annotations

import argparse
import sys

from .convert import ConvertError, convert
from .split import split_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rml-ingest",
        description="RadioML2016.10A corpus converter for the CAMCDS01 format")
    sub = parser.add_subparsers(dest="command", required=True)

    p_conv = sub.add_parser("convert", help="archive pickle -> CAMCDS01 + manifest")
    p_conv.add_argument("--in", dest="source", required=True)
    p_conv.add_argument("--out", required=True)
    p_conv.add_argument("--mods", default=None,
                        help="comma-separated modulation filter")
    p_conv.add_argument("--snrs", default=None,
                        help="comma-separated SNR filter (dB)")

    p_split = sub.add_parser("split", help="stratified train/val/test split")
    p_split.add_argument("--in", dest="source", required=True)
    p_split.add_argument("--ratios", default="0.6,0.2,0.2")
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--out", nargs="+", required=True,
                         help="one output path per ratio")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert":
            mods = args.mods.split(",") if args.mods else None
            snrs = [int(s) for s in args.snrs.split(",")] if args.snrs else None
            manifest = convert(args.source, args.out, mods, snrs)
            print(f"wrote {args.out}: {manifest['total_frames']} frames, "
                  f"{len(manifest['modulations'])} modulations")
        else:
            manifest = split_dataset(args.source, args.ratios.split(","),
                                     args.seed, args.out)
            for entry in manifest["outputs"]:
                print(f"{entry['path']}: {entry['n_frames']} frames")
    except (ConvertError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
