"""Exporter command line: convert saved Keras models, or rebuild fixtures."""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="caadnn-export")
    sub = parser.add_subparsers(dest="command", required=True)
    pm = sub.add_parser("model", help="export a saved Keras model to schema JSON")
    pm.add_argument("--keras", required=True, help="path to a .keras/.h5 model")
    pm.add_argument("--out", required=True, help="output JSON path")
    pm.add_argument("--name", default=None)
    pf = sub.add_parser("fixtures", help="train and write the fixture networks")
    pf.add_argument("--out", required=True, help="output directory")
    pf.add_argument("--quick", action="store_true", help="fewer training epochs")
    pf.add_argument("--verbose", type=int, default=0)
    args = parser.parse_args(argv)

    from .export import ExportError, export_model

    try:
        if args.command == "model":
            import tensorflow as tf
            model = tf.keras.models.load_model(args.keras)
            manifest = export_model(model, args.out, name=args.name)
            print(json.dumps(manifest.to_json(), indent=1))
        else:
            from .fixtures import make_fixtures
            summary = make_fixtures(args.out, quick=args.quick, verbose=args.verbose)
            print(json.dumps(summary, indent=1))
        return 0
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
