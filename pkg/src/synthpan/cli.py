"""Command-line entry point: ``synthpan <command> [options]``.

Every option can also come from a JSON config file (``--config``) whose keys
are the option names with dashes replaced by underscores; command-line flags
win over the file. Exit codes: 0 success, 1 validation violations, 2 errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

from synthpan import annotate, pipeline, taxonomy
from synthpan.scene import miniworksite_path
from synthpan.tour import CameraIntrinsics, TourParams

EXIT_OK, EXIT_VIOLATIONS, EXIT_ERROR = 0, 1, 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthpan", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with default option values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render and annotate a synthetic dataset")
    g.add_argument("--scene", default=str(miniworksite_path()), help="scene descriptor (default: bundled fixture)")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=10)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--epoch-length", type=int, default=5)
    g.add_argument("--max-step", type=float, default=0.5)
    g.add_argument("--pitch-limit", type=float, default=20.0, help="degrees")
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--fx", type=float)
    g.add_argument("--fy", type=float)
    g.add_argument("--cx", type=float)
    g.add_argument("--cy", type=float)
    g.add_argument("--depth", action="store_true", help="also write float32 depth files")
    g.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    g.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("split", help="tag manifest frames train/val/test")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, required=True)
    grp = s.add_mutually_exclusive_group()
    grp.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    grp.add_argument("--counts", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--overwrite", action="store_true")

    c = sub.add_parser("convert", help="annotate external semantic masks")
    c.add_argument("masks", nargs="+")
    c.add_argument("--taxonomy", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    c.add_argument("--strict", action="store_true", help="fail on off-palette pixels")

    e = sub.add_parser("evaluate", help="score panoptic predictions against a dataset")
    e.add_argument("--manifest", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", help="write the JSON report here")

    v = sub.add_parser("validate", help="check a dataset for consistency")
    v.add_argument("--manifest", required=True)
    v.add_argument("--sample", type=int, help="pixel-check only this many frames")

    p = sub.add_parser("preview", help="write a contact sheet of frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame-ids", type=int, nargs="*")
    p.add_argument("--scale", type=float, default=0.25)
    return parser


def _parse(argv: Optional[List[str]]) -> argparse.Namespace:
    args = _build_parser().parse_args(argv)
    if args.config:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        given = {a.lstrip("-").split("=")[0].replace("-", "_") for a in (argv or sys.argv[1:]) if a.startswith("--")}
        for key, value in cfg.items():
            if key not in given:
                setattr(args, key, value)
    return args


def _cmd_generate(args) -> int:
    base = CameraIntrinsics()
    overrides = {k: getattr(args, k) for k in ("width", "height", "fx", "fy", "cx", "cy") if getattr(args, k) is not None}
    intrinsics = None
    if overrides:
        intrinsics = CameraIntrinsics(**{**base.__dict__, **overrides})
    tour = TourParams(max_step=args.max_step, pitch_limit=math.radians(args.pitch_limit),
                      epoch_length=args.epoch_length)
    config = pipeline.GenerateConfig(n_frames=args.frames, seed=args.seed, tour=tour, intrinsics=intrinsics,
                                     write_depth=args.depth, connectivity=args.connectivity, workers=args.workers)
    manifest = pipeline.run_generate(args.scene, args.out, config)
    print(f"generated {len(manifest.frames)} frames in {args.out}")
    return EXIT_OK


def _cmd_split(args) -> int:
    manifest = pipeline.load_manifest(Path(args.manifest))
    if args.counts:
        spec = pipeline.SplitSpec(counts=tuple(args.counts), seed=args.seed)
    else:
        spec = pipeline.SplitSpec(ratios=tuple(args.ratios or (0.7, 0.1, 0.2)), seed=args.seed)
    manifest = pipeline.split_dataset(manifest, spec, overwrite=args.overwrite)
    manifest.save(args.manifest)
    counts = manifest.split_counts()
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _cmd_convert(args) -> int:
    tax = taxonomy.load_taxonomy(args.taxonomy)
    inst, pan = pipeline.convert_masks(args.masks, tax, args.out, args.connectivity, args.strict)
    print(f"converted {len(pan['images'])} masks: {len(inst['annotations'])} thing annotations")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    report = pipeline.run_evaluate(args.manifest, args.predictions, split=args.split, report_path=args.report)
    print(report.table())
    return EXIT_OK


def _cmd_validate(args) -> int:
    report = pipeline.validate_manifest(args.manifest, sample=args.sample)
    for v in report.violations:
        print(v)
    print(f"{len(report.violations)} violations in {report.frames_checked} pixel-checked frames")
    return EXIT_OK if report.ok else EXIT_VIOLATIONS


def _cmd_preview(args) -> int:
    path = pipeline.preview(args.manifest, args.out, args.frame_ids or None, scale=args.scale)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"generate": _cmd_generate, "split": _cmd_split, "convert": _cmd_convert,
            "evaluate": _cmd_evaluate, "validate": _cmd_validate, "preview": _cmd_preview}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (pipeline.PipelineError, annotate.CocoError, annotate.ConversionError, taxonomy.TaxonomyError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
