"""Command line: ``extract --manifest M --checkpoint C --out E.mfse
--labels L.tsv [--strict] [--batch-size N]``.

Exit codes: 0 success, 2 usage error, 3 manifest/image/checkpoint error.
"""

from __future__ import annotations

import argparse
import sys

from .extractor import ExtractError, ExtractJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract",
        description="Export image embeddings from a TorchScript encoder "
                    "into .mfse + labels TSV.")
    parser.add_argument("--manifest", required=True,
                        help="TSV manifest: path, class_id, sample_id[, label] per line")
    parser.add_argument("--checkpoint", required=True,
                        help="TorchScript encoder file ([B,3,S,S] -> [B,D])")
    parser.add_argument("--out", required=True, help="output .mfse path")
    parser.add_argument("--labels", required=True, help="output labels TSV path")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--strict", action="store_true",
                        help="abort on undecodable images instead of skipping")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    job = ExtractJob(manifest=args.manifest, checkpoint=args.checkpoint,
                     out=args.out, labels_out=args.labels,
                     batch_size=args.batch_size, strict=args.strict)
    try:
        report = extract(job)
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {args.out} ({report.count} records, dim {report.dim}) "
          f"and {args.labels}")
    if report.skipped:
        print(f"skipped {len(report.skipped)} undecodable image(s)", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
