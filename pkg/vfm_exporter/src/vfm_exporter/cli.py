"""Command-line entry point: `export-features --spec <json>`."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ExporterError
from .export import ExportSpec, export_features


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-features",
        description="Export multi-layer ViT patch features to feature files.",
    )
    parser.add_argument("--spec", required=True, help="JSON export spec")
    args = parser.parse_args(argv)

    try:
        spec_path = Path(args.spec)
        doc = json.loads(spec_path.read_text(encoding="utf-8"))
        spec = ExportSpec.from_dict(doc, spec_path.parent)
        for path in export_features(spec):
            print(f"wrote {path}")
    except json.JSONDecodeError as e:
        print(f"error: {args.spec} is not valid JSON: {e}", file=sys.stderr)
        return 1
    except (ExporterError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
