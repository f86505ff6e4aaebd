"""End-to-end runs: register every atlas, fuse, post-process, evaluate.

Artifact tree for ``run_segment`` (one directory per target case)::

    <output_dir>/summary.json
    <output_dir>/evaluation.csv                 (when ground truth exists)
    <output_dir>/<case>/transforms/<atlas>.json
    <output_dir>/<case>/warped/<atlas>_image.nii, <atlas>_labels.nii
    <output_dir>/<case>/consensus.nii
    <output_dir>/<case>/final/<structure>.nii
    <trace_dir>/<case>/<stage>_<structure>.nii   (when tracing)
"""

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from . import metrics
from .fusion import FusionParams, WarpedAtlas, extract_structure, fuse_labels
from .nifti import load_manifest, read_labels, read_volume, write_nifti
from .postprocess import PostprocessParams, postprocess_chain
from .registration import RegistrationParams, register
from .volume import AffineTransform, BSplineGrid, warp_labels, warp_volume

MODES = ("vertebra-only", "joint", "bundled")
_MODE_ALIASES = {"v": "vertebra-only", "vertebra": "vertebra-only", "vr": "joint",
                 "joint-vertebra-rib": "joint"}

STAGE_EXIT_CODES = {"config": 3, "load": 4, "register": 5, "fuse": 6,
                    "postprocess": 7, "evaluate": 8, "write": 9}


class PipelineError(Exception):
    """A failure attributed to one pipeline stage."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = STAGE_EXIT_CODES.get(stage, 1)


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None or isinstance(exc, PipelineError):
            return False
        raise PipelineError(self.name, f"{type(exc).__name__}: {exc}") from exc


def normalise_mode(mode):
    m = str(mode).strip().lower()
    m = _MODE_ALIASES.get(m, m)
    if m not in MODES:
        raise ValueError(f"unknown atlas mode {mode!r}; expected one of {MODES}")
    return m


def kept_names(mode, structure="vertebra"):
    """Label names an atlas contributes in the given mode."""
    mode = normalise_mode(mode)
    if mode == "vertebra-only":
        return lambda name: name == structure
    if mode == "joint":
        return lambda name: name in (structure, "rib")
    return lambda name: name.startswith(structure)


def filter_labels(labels, mode, structure="vertebra"):
    """Drop every label the mode does not use (set to background)."""
    keep = kept_names(mode, structure)
    ids = [k for k, v in labels.legend.items() if k != 0 and keep(v)]
    data = np.where(np.isin(labels.data, ids), labels.data, 0)
    legend = {k: v for k, v in labels.legend.items() if k == 0 or k in ids}
    return labels.with_data(data, legend)


@dataclass(frozen=True)
class RunConfig:
    manifest: str
    mode: str = "joint"
    output_dir: str = "run"
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    fusion: FusionParams = field(default_factory=FusionParams)
    postprocess: PostprocessParams = field(default_factory=PostprocessParams)
    jobs: int = 1
    trace: bool = False
    trace_dir: str = None
    seed: int = None
    structure: str = "vertebra"

    def __post_init__(self):
        object.__setattr__(self, "mode", normalise_mode(self.mode))
        if int(self.jobs) < 1:
            raise ValueError("jobs must be >= 1")
        if self.seed is not None:
            object.__setattr__(self, "registration", replace(self.registration, seed=int(self.seed)))

    def to_dict(self):
        d = asdict(self)
        d["postprocess"] = self.postprocess.to_dict()
        return d

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "manifest" not in d:
            raise ValueError("config needs a 'manifest' path")
        for key in ("manifest", "output_dir", "trace_dir"):
            if d.get(key) and not os.path.isabs(d[key]):
                d[key] = os.path.normpath(os.path.join(base_dir, d[key]))
        d["registration"] = RegistrationParams.from_dict(d.get("registration"))
        d["fusion"] = FusionParams(**(d.get("fusion") or {}))
        d["postprocess"] = PostprocessParams.from_dict(d.get("postprocess"))
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc, os.path.dirname(os.path.abspath(path)))


# -- transforms on disk ------------------------------------------------------

def transform_to_dict(t):
    if isinstance(t, AffineTransform):
        return {"type": "affine", "matrix": np.asarray(t.matrix).tolist()}
    return {"type": "bspline", "dims": list(t.dims), "spacing": list(t.spacing),
            "origin": list(t.origin), "affine": np.asarray(t.affine.matrix).tolist(),
            "displacements": np.asarray(t.displacements).tolist()}


def transform_from_dict(d):
    if d["type"] == "affine":
        return AffineTransform(np.asarray(d["matrix"]))
    return BSplineGrid(tuple(d["dims"]), tuple(d["spacing"]), tuple(d["origin"]),
                       np.asarray(d["displacements"]), AffineTransform(np.asarray(d["affine"])))


def _register_pair(args):
    target, atlas_image, params = args
    affine, bspline = register(target, atlas_image, params)
    return affine.transform, bspline.transform, bool(affine.converged and bspline.converged)


def register_atlases(target, images, params, jobs=1):
    """(affine, b-spline, converged) per atlas, in input order; a process pool when jobs > 1."""
    tasks = [(target, img, params) for img in images]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            return list(pool.map(_register_pair, tasks))
    return [_register_pair(t) for t in tasks]


# -- results -----------------------------------------------------------------

@dataclass
class CaseResult:
    case_id: str
    masks: dict  # structure name -> LabelMap
    report: object = None  # metrics.EvalReport or None
    transforms: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)


@dataclass
class SegmentResult:
    cases: list
    summary: dict
    config: RunConfig = None

    @property
    def reports(self):
        return [c.report for c in self.cases if c.report is not None]


def _write(image, path, files, key):
    with _stage("write"):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_nifti(image, path)
    files[key] = path


def _load_atlases(manifest):
    out = []
    for a in manifest.atlases:
        img = read_volume(a.image)
        lab = read_labels(a.labels)
        lab = lab.with_data(lab.data, {**lab.legend, **a.legend})
        out.append((a, img, lab))
    return out


def _structure_masks(consensus, config):
    """(structure masks, context masks, names) for the post-processing chain."""
    by_name = {v: k for k, v in consensus.legend.items() if k != 0}
    if config.structure not in by_name:
        raise ValueError(f"structure {config.structure!r} is not in the fused legend {consensus.legend}")
    target = extract_structure(consensus, by_name[config.structure])
    ctx_names = sorted(n for n in by_name if n != config.structure)
    ctx = [extract_structure(consensus, by_name[n]) for n in ctx_names]
    return [target], ctx, [config.structure] + ctx_names


def _evaluate_case(final, entry, config):
    gt = read_labels(entry.ground_truth)
    ids = [k for k, v in gt.legend.items() if v == config.structure]
    gt_mask = gt.with_data(np.isin(gt.data, ids).astype(np.int32), {0: "background", 1: config.structure}) \
        if ids else gt.with_data((gt.data != 0).astype(np.int32), {0: "background", 1: config.structure})
    subs = {name: read_labels(p) for name, p in sorted(entry.substructures.items())}
    return metrics.evaluate(final, gt_mask, subs, case_id=entry.id)


def _run_case(config, entry, atlases, transforms=None):
    timings, files = {}, {}
    case_dir = os.path.join(config.output_dir, entry.id)
    with _stage("load"):
        target = read_volume(entry.image)

    t0 = time.perf_counter()
    if transforms is None:
        with _stage("register"):
            transforms = register_atlases(target, [img for _, img, _ in atlases], config.registration,
                                          config.jobs)
    timings["register"] = time.perf_counter() - t0
    for (a, _, _), (aff, bsp, ok) in zip(atlases, transforms):
        path = os.path.join(case_dir, "transforms", f"{a.id}.json")
        with _stage("write"):
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w") as fh:
                json.dump({"affine": transform_to_dict(aff), "bspline": transform_to_dict(bsp),
                           "converged": ok}, fh, sort_keys=True)
        files[f"transform/{a.id}"] = path

    t0 = time.perf_counter()
    with _stage("fuse"):
        warped = []
        for (a, img, lab), (_, bsp, _) in zip(atlases, transforms):
            wi = warp_volume(img, bsp, target.grid)
            wl = warp_labels(filter_labels(lab, config.mode, config.structure), bsp, target.grid)
            warped.append(WarpedAtlas(wi, wl, a.id))
        consensus = fuse_labels(warped, target, config.fusion)
    for w in warped:
        _write(w.intensity, os.path.join(case_dir, "warped", f"{w.source_id}_image.nii"), files,
               f"warped/{w.source_id}/image")
        _write(w.labels, os.path.join(case_dir, "warped", f"{w.source_id}_labels.nii"), files,
               f"warped/{w.source_id}/labels")
    _write(consensus, os.path.join(case_dir, "consensus.nii"), files, "consensus")
    timings["fuse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("postprocess"):
        masks, ctx, names = _structure_masks(consensus, config)
        chain = postprocess_chain(masks, target, config.postprocess, ctx, trace=config.trace)
    timings["postprocess"] = time.perf_counter() - t0
    final = {names[0]: chain.masks[0]}
    final.update({n: m for n, m in zip(names[1:], chain.context)})
    for name, m in final.items():
        _write(m, os.path.join(case_dir, "final", f"{name}.nii"), files, f"final/{name}")
    if config.trace:
        tdir = os.path.join(config.trace_dir or os.path.join(config.output_dir, "trace"), entry.id)
        for stage, m in chain.trace[0].items():
            _write(m, os.path.join(tdir, f"{stage}_{names[0]}.nii"), files, f"trace/{stage}")

    report = None
    if entry.ground_truth:
        t0 = time.perf_counter()
        with _stage("evaluate"):
            report = _evaluate_case(chain.masks[0], entry, config)
        timings["evaluate"] = time.perf_counter() - t0
    return CaseResult(entry.id, final, report, transforms, timings, files)


def _write_summary(config, cases, total):
    summary = {
        "config": config.to_dict(),
        "mode": config.mode,
        "total_seconds": total,
        "cases": {
            c.case_id: {
                "timings": c.timings,
                "converged": [bool(t[2]) for t in c.transforms],
                "files": {k: os.path.relpath(v, config.output_dir) for k, v in sorted(c.files.items())},
                "metrics": None if c.report is None else {
                    r: asdict(s) for r, s in c.report.regions.items()},
            } for c in cases
        },
    }
    reports = [c.report for c in cases if c.report is not None]
    with _stage("write"):
        os.makedirs(config.output_dir, exist_ok=True)
        with open(os.path.join(config.output_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        if reports:
            header, rows = metrics.case_rows(reports)
            with open(os.path.join(config.output_dir, "evaluation.csv"), "w") as fh:
                fh.write(metrics.to_csv(header, rows))
    return summary


def run_segment(config, transforms=None):
    """Segment every target listed in the manifest.

    ``transforms`` optionally maps case id -> precomputed registration
    results, skipping the register stage (used to share registrations
    between runs that differ only in labels).
    """
    start = time.perf_counter()
    with _stage("load"):
        manifest = load_manifest(config.manifest)
        atlases = _load_atlases(manifest)
    cases = []
    for entry in manifest.targets:
        pre = None if transforms is None else transforms.get(entry.id)
        cases.append(_run_case(config, entry, atlases, pre))
    summary = _write_summary(config, cases, time.perf_counter() - start)
    return SegmentResult(cases, summary, config)


# -- V vs VR comparison -------------------------------------------------------

@dataclass
class CompareResult:
    header: list
    rows: list  # summary table, one row per run
    delta_header: list
    deltas: list  # per case: VR - V for every region and metric
    flags: dict  # case id -> True when the second run lowers whole-structure ASD_max
    first: SegmentResult = None
    second: SegmentResult = None


_METRICS = ("dc", "asd", "asd_max")


def case_deltas(first_reports, second_reports):
    """Header and rows of per-case differences (second - first)."""
    if [r.case_id for r in first_reports] != [r.case_id for r in second_reports]:
        raise ValueError("both runs must cover the same cases in the same order")
    regions = list(first_reports[0].regions) if first_reports else []
    header = ["case"] + [f"d{m.upper()}-{r}" for m in _METRICS for r in regions] + ["asd_max_reduced"]
    rows, flags = [], {}
    for a, b in zip(first_reports, second_reports):
        vals = [getattr(b.regions[r], m) - getattr(a.regions[r], m) for m in _METRICS for r in regions]
        reduced = bool(b.regions[metrics.WHOLE].asd_max < a.regions[metrics.WHOLE].asd_max)
        flags[a.case_id] = reduced
        rows.append([a.case_id] + [f"{v:.4f}" for v in vals] + [str(reduced).lower()])
    return header, rows, flags


def _comparable(a, b):
    da, db = a.to_dict(), b.to_dict()
    for d in (da, db):
        for key in ("mode", "output_dir", "trace_dir", "jobs", "trace"):
            d.pop(key)
    return da == db


def run_compare(config_v, config_vr, output_dir=None, labels=("V", "VR")):
    """Run both configurations on the same cases and tabulate the difference.

    Registration depends only on intensities, so it runs once per case and
    is shared by both runs.
    """
    if not _comparable(config_v, config_vr):
        raise PipelineError("config", "compared configs may differ only in atlas mode and output paths")
    output_dir = output_dir or os.path.join(config_v.output_dir, "compare")
    first = run_segment(config_v)
    shared = {c.case_id: c.transforms for c in first.cases}
    second = run_segment(config_vr, shared)
    if not first.reports or len(first.reports) != len(first.cases):
        raise PipelineError("evaluate", "comparison needs ground truth for every case")
    with _stage("evaluate"):
        header, rows = metrics.table_rows({labels[0]: first.reports, labels[1]: second.reports})
        dh, drows, flags = case_deltas(first.reports, second.reports)
    with _stage("write"):
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "compare.csv"), "w") as fh:
            fh.write(metrics.to_csv(header, rows))
        with open(os.path.join(output_dir, "compare.md"), "w") as fh:
            fh.write(metrics.to_markdown(header, rows))
        with open(os.path.join(output_dir, "deltas.csv"), "w") as fh:
            fh.write(metrics.to_csv(dh, drows))
        with open(os.path.join(output_dir, "compare.json"), "w") as fh:
            json.dump({"labels": list(labels), "reduced": flags,
                       "reduced_count": int(sum(flags.values())), "cases": len(flags)},
                      fh, indent=2, sort_keys=True)
    return CompareResult(header, rows, dh, drows, flags, first, second)


# -- overlays -----------------------------------------------------------------

OVERLAY_COLOURS = (("gt", (255, 255, 0)), ("v", (255, 0, 0)), ("vr", (0, 0, 255)))
_CROSS = ndimage.generate_binary_structure(2, 1)


def _slice(data, axis, index):
    return np.take(np.asarray(data), index, axis=axis)


def contour(mask2d):
    """In-plane boundary pixels (4-neighbourhood, outside counts as background)."""
    m = np.asarray(mask2d) != 0
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def render_overlay(target, gt=None, mask_v=None, mask_vr=None, axis=2, index=None, path=None, window=None):
    """RGB slice with contours: ground truth yellow, V red, VR blue (drawn in that order).

    Pixel (r, c) shows voxel (c, n - 1 - r) of the in-plane axes, i.e. the
    first in-plane axis runs left to right and the second bottom to top.
    """
    grid = target.grid
    for m in (gt, mask_v, mask_vr):
        if m is not None and not m.grid.same_as(grid):
            raise ValueError("overlay inputs must share the target grid")
    if index is None:
        index = target.dims[axis] // 2
    if not 0 <= index < target.dims[axis]:
        raise IndexError(f"slice {index} outside axis {axis} of size {target.dims[axis]}")
    img = _slice(target.data, axis, index)
    lo, hi = window if window is not None else (float(target.data.min()), float(target.data.max()))
    scale = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    gray = np.round(np.clip(scale, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for (name, colour), m in zip(OVERLAY_COLOURS, (gt, mask_v, mask_vr)):
        if m is not None:
            rgb[contour(_slice(m.data, axis, index))] = colour
    rgb = np.flipud(np.transpose(rgb, (1, 0, 2)))
    if path is not None:
        Image.fromarray(np.ascontiguousarray(rgb)).save(path, format="PNG")
    return rgb
