"""Command line entry point: ``multiatlas <verb> ...``.

Exit codes: 0 success, 2 usage, then one code per failing stage
(config 3, load 4, register 5, fuse 6, postprocess 7, evaluate 8, write 9).
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import metrics, phantom
from .nifti import NiftiError, read_labels, read_volume
from .pipeline import STAGE_EXIT_CODES, PipelineError, RunConfig, render_overlay, run_compare, run_segment

log = logging.getLogger("multiatlas")


def _config(args, mode=None):
    try:
        cfg = RunConfig.load(args.config)
        overrides = {}
        if mode is not None:
            overrides["mode"] = mode
        if getattr(args, "mode", None):
            overrides["mode"] = args.mode
        if args.output:
            overrides["output_dir"] = os.path.abspath(args.output)
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        if args.trace_dir:
            overrides["trace"] = True
            overrides["trace_dir"] = os.path.abspath(args.trace_dir)
        if args.seed is not None:
            overrides["seed"] = args.seed
        return replace(cfg, **overrides) if overrides else cfg
    except (ValueError, TypeError) as exc:
        raise PipelineError("config", str(exc)) from None


def cmd_segment(args):
    result = run_segment(_config(args))
    for case in result.cases:
        if case.report is not None:
            s = case.report.regions[metrics.WHOLE]
            print(f"{case.case_id}: DC {s.dc:.2f}  ASD {s.asd:.3f}  ASD_max {s.asd_max:.3f}")
        else:
            print(f"{case.case_id}: done")
    print(f"outputs in {result.config.output_dir}")


def cmd_compare(args):
    v = _config(args)
    out = v.output_dir
    if args.config_vr:
        vr = _config(argparse.Namespace(**{**vars(args), "config": args.config_vr}))
    else:
        v, vr = replace(v, mode="vertebra-only"), replace(v, mode="joint")
    v = replace(v, output_dir=os.path.join(out, "V"))
    vr = replace(vr, output_dir=os.path.join(out, "VR"))
    result = run_compare(v, vr, output_dir=os.path.join(out, "compare"))
    print(metrics.to_markdown(result.header, result.rows), end="")
    n = sum(result.flags.values())
    print(f"ASD_max reduced in {n}/{len(result.flags)} cases")


def cmd_evaluate(args):
    try:
        seg = read_labels(args.seg)
        gt = read_labels(args.gt)
        subs = {}
        for item in args.sub or []:
            name, _, path = item.partition("=")
            if not path:
                raise PipelineError("config", f"--sub expects NAME=PATH, got {item!r}")
            subs[name] = read_labels(path)
    except (OSError, NiftiError) as exc:
        raise PipelineError("load", str(exc)) from None

    def binary(lab):
        ids = [k for k, v in lab.legend.items() if v == args.structure]
        keep = (lab.data != 0) if not ids else (lab.data == ids[0])
        return lab.with_data(keep.astype("int32"), {0: "background", 1: args.structure})

    try:
        report = metrics.evaluate(binary(seg), binary(gt), subs, case_id=os.path.basename(args.seg),
                                  symmetric=args.symmetric)
    except ValueError as exc:
        raise PipelineError("evaluate", str(exc)) from None
    header, rows = metrics.case_rows([report])
    text = metrics.to_csv(header, rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")


def cmd_phantom(args):
    try:
        doc = {}
        if args.config:
            with open(args.config) as fh:
                doc = json.load(fh)
        suite = phantom.SuiteConfig.from_dict(doc)
        if args.seed is not None:
            suite = replace(suite, seed=args.seed)
    except (OSError, ValueError, TypeError) as exc:
        raise PipelineError("config", str(exc)) from None
    try:
        path = phantom.write_suite(args.output, suite)
    except OSError as exc:
        raise PipelineError("write", str(exc)) from None
    print(path)


def cmd_overlay(args):
    try:
        target = read_volume(args.target)
        masks = [read_labels(p) if p else None for p in (args.gt, args.mask_v, args.mask_vr)]
    except (OSError, NiftiError) as exc:
        raise PipelineError("load", str(exc)) from None
    try:
        render_overlay(target, *masks, axis=args.axis, index=args.index, path=args.out)
    except (ValueError, IndexError) as exc:
        raise PipelineError("config", str(exc)) from None
    except OSError as exc:
        raise PipelineError("write", str(exc)) from None
    print(args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="multiatlas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def run_flags(p):
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--output", help="output directory (overrides the config)")
        p.add_argument("--jobs", type=int, help="parallel registrations")
        p.add_argument("--trace-dir", help="write per-stage masks here")
        p.add_argument("--seed", type=int, help="registration sampling seed")

    p = sub.add_parser("segment", help="segment every target in the manifest")
    run_flags(p)
    p.add_argument("--mode", help="vertebra-only | joint | bundled")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("compare", help="vertebra-only vs joint vertebra-rib atlases")
    run_flags(p)
    p.add_argument("--config-vr", help="second config; default: same config in joint mode")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("evaluate", help="score a segmentation against ground truth")
    p.add_argument("--seg", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--sub", action="append", metavar="NAME=PATH", help="substructure region mask")
    p.add_argument("--structure", default="vertebra")
    p.add_argument("--symmetric", action="store_true", help="average both surface directions")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="write a synthetic atlas/target suite")
    p.add_argument("--config", help="suite config (JSON); defaults if omitted")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("overlay", help="PNG slice with contour overlays")
    p.add_argument("--target", required=True)
    p.add_argument("--gt")
    p.add_argument("--mask-v")
    p.add_argument("--mask-vr")
    p.add_argument("--axis", type=int, default=2, choices=(0, 1, 2))
    p.add_argument("--index", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser", "STAGE_EXIT_CODES"]
