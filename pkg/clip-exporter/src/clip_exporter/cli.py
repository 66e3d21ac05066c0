"""Command line entry point: input directory, output path, model id."""

import argparse
import logging
import sys

from .export import (DEFAULT_MODEL, DatasetError, ExportError,
                     ExportManifest, export_clip_features)


def build_parser():
    p = argparse.ArgumentParser(
        prog="clip-export",
        description="Encode every image under a class-per-subdirectory "
                    "dataset root and write a CLFT feature table.")
    p.add_argument("root", help="dataset root directory")
    p.add_argument("output", help="output feature table path")
    p.add_argument("--model", default=DEFAULT_MODEL,
                   help="model identifier (default: %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="log per-file skips")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    manifest = ExportManifest(root=args.root, output_path=args.output,
                              model_id=args.model)
    try:
        report = export_clip_features(manifest)
    except (DatasetError, ExportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(report.summary())
    print(f"report: {report.sidecar_path()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
