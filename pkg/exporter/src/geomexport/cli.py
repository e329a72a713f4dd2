"""Exporter command line: run backends over frames, or validate an export.

Exit codes: 0 success, 1 validation violations, 2 usage/config errors,
3 backend failure (with the backend's error captured on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backends import BackendError
from .export import ExporterConfig, ExportError, export_clip, validate_export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomexport", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run backends on a frame directory")
    p.add_argument("frames_dir", type=Path)
    p.add_argument("output_dir", type=Path)
    p.add_argument("--config", type=Path, help="JSON file of ExporterConfig fields (overrides flags)")
    p.add_argument("--geometry-backend", default="geomexport.backends:ConstantGeometry")
    p.add_argument("--flow-backend", default="geomexport.backends:ZeroFlow")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--flow-downscale", type=float, default=1.0)
    p.add_argument("--fps", type=float, default=8.0)
    p.add_argument("--clip-id", default="")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("validate", help="check an emitted manifest against the load invariants")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="write the report JSON here")
    p.set_defaults(func=cmd_validate)
    return parser


def cmd_export(args) -> int:
    if args.config is not None:
        config = ExporterConfig.from_json(args.config)
    else:
        config = ExporterConfig(
            frames_dir=args.frames_dir,
            output_dir=args.output_dir,
            geometry_backend=args.geometry_backend,
            flow_backend=args.flow_backend,
            window=args.window,
            flow_downscale=args.flow_downscale,
            fps=args.fps,
            clip_id=args.clip_id,
        )
    manifest = export_clip(config)
    print(manifest)
    return 0


def cmd_validate(args) -> int:
    report = validate_export(args.manifest)
    doc = report.to_json()
    if args.out is not None:
        args.out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for violation in report.violations:
        print(f"violation: {violation}", file=sys.stderr)
    print(f"{'ok' if report.ok else 'FAILED'}: {len(report.violations)} violation(s)")
    return 0 if report.ok else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except (ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
