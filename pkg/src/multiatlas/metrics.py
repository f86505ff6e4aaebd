"""Dice coefficient, one-sided surface distances and table-style reports."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

WHOLE = "WV"
_FACE = ndimage.generate_binary_structure(3, 1)


class UndefinedMetricError(ValueError):
    pass


def _binary(m):
    return np.asarray(m.data) != 0


def _same_grid(a, b):
    if not a.grid.same_as(b.grid):
        raise ValueError("masks must share a grid")


def dice(gt, seg):
    """2|GT & S| / (|GT| + |S|) in percent; two empty masks score 100."""
    _same_grid(gt, seg)
    g, s = _binary(gt), _binary(seg)
    total = int(g.sum()) + int(s.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.count_nonzero(g & s)) / total


@dataclass(frozen=True, eq=False)
class SurfaceSet:
    points: np.ndarray  # (N, 3) mm
    grid: object

    def __len__(self):
        return len(self.points)


def surface_voxels(mask):
    """Foreground voxels with at least one background face neighbour (outside counts as background)."""
    b = _binary(mask)
    surf = b & ~ndimage.binary_erosion(b, structure=_FACE, border_value=0)
    idx = np.argwhere(surf)
    grid = mask.grid
    return SurfaceSet(np.asarray(grid.origin) + idx * np.asarray(grid.spacing), grid)


def _nearest_distances(src, dst, k=4):
    if len(src) == 0 or len(dst) == 0:
        raise UndefinedMetricError("surface distance is undefined for an empty surface")
    k = min(k, len(dst))
    _, idx = cKDTree(dst).query(src, k=k)
    idx = idx.reshape(len(src), k)
    # recompute exactly on the candidates so results match a brute-force scan bit for bit
    d = np.sqrt(((src[:, None, :] - dst[idx]) ** 2).sum(axis=-1))
    return d.min(axis=1)


def surface_distances(seg_surface, gt_surface):
    """Distance from each seg surface point to the nearest gt surface point (mm)."""
    return _nearest_distances(np.asarray(seg_surface.points), np.asarray(gt_surface.points))


def asd(seg_surface, gt_surface, symmetric=False):
    """Mean seg->gt surface distance; ``symmetric`` averages both directions."""
    d = surface_distances(seg_surface, gt_surface)
    if not symmetric:
        return float(d.mean())
    back = surface_distances(gt_surface, seg_surface)
    return float((d.sum() + back.sum()) / (len(d) + len(back)))


def asd_max(seg_surface, gt_surface, symmetric=False):
    """Largest seg->gt surface distance."""
    d = surface_distances(seg_surface, gt_surface)
    if symmetric:
        d = np.concatenate([d, surface_distances(gt_surface, seg_surface)])
    return float(d.max())


@dataclass
class RegionScore:
    dc: float
    asd: float
    asd_max: float


@dataclass
class EvalReport:
    """Per-region scores for one case, or aggregated mean/std over several."""

    regions: dict = field(default_factory=dict)  # name -> RegionScore
    std: dict = field(default_factory=dict)  # name -> RegionScore (aggregates only)
    n: int = 1
    case_id: str = ""

    def value(self, region, metric):
        return getattr(self.regions[region], metric)


def _restrict(mask, region):
    if region is None:
        return mask
    _same_grid(mask, region)
    return mask.with_data(np.where(_binary(region), mask.data, 0))


def score_pair(seg, gt, symmetric=False):
    s, g = surface_voxels(seg), surface_voxels(gt)
    if len(s) == 0 and len(g) == 0:
        return RegionScore(dice(gt, seg), 0.0, 0.0)
    if len(s) == 0 or len(g) == 0:
        return RegionScore(dice(gt, seg), float("nan"), float("nan"))
    return RegionScore(dice(gt, seg), asd(s, g, symmetric), asd_max(s, g, symmetric))


def evaluate(seg, gt, substructures=None, case_id="", symmetric=False):
    """Whole-structure scores plus one row per substructure region (seg & region vs gt & region)."""
    _same_grid(seg, gt)
    regions = {WHOLE: score_pair(seg, gt, symmetric)}
    for name, region in (substructures or {}).items():
        regions[name] = score_pair(_restrict(seg, region), _restrict(gt, region), symmetric)
    return EvalReport(regions, n=1, case_id=case_id)


def aggregate(reports):
    """Mean and sample standard deviation per region and metric (NaN entries skipped)."""
    if not reports:
        raise ValueError("nothing to aggregate")
    names = list(reports[0].regions)
    mean, std = {}, {}
    for name in names:
        vals = {m: np.array([getattr(r.regions[name], m) for r in reports], dtype=float)
                for m in ("dc", "asd", "asd_max")}
        means, stds = {}, {}
        for m, v in vals.items():
            v = v[np.isfinite(v)]
            means[m] = float(v.mean()) if len(v) else float("nan")
            stds[m] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        mean[name] = RegionScore(**means)
        std[name] = RegionScore(**stds)
    return EvalReport(mean, std, n=len(reports))


def _fmt(mean, std, digits):
    if not np.isfinite(mean):
        return "n/a"
    return f"{mean:.{digits}f} ({std:.{digits}f})"


def table_rows(groups):
    """Summary rows (mean and std per region) from ``{group_name: [EvalReport, ...]}``.

    Columns: group, N, DC-<region>..., ASD-<region>..., ASD_max-<region>...
    """
    header, rows = None, []
    for group, reports in groups.items():
        agg = aggregate(reports)
        regions = list(agg.regions)
        if header is None:
            header = (["group", "N"] + [f"DC-{r}" for r in regions] + [f"ASD-{r}" for r in regions]
                      + [f"ASD_max-{r}" for r in regions])
        row = [group, str(agg.n)]
        row += [_fmt(agg.regions[r].dc, agg.std[r].dc, 1) for r in regions]
        row += [_fmt(agg.regions[r].asd, agg.std[r].asd, 2) for r in regions]
        row += [_fmt(agg.regions[r].asd_max, agg.std[r].asd_max, 2) for r in regions]
        rows.append(row)
    return header or ["group", "N"], rows


def to_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def to_markdown(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def case_rows(reports):
    """One CSV row per case and region with raw (unaggregated) scores."""
    header = ["case", "region", "DC", "ASD", "ASD_max"]
    rows = []
    for r in reports:
        for name, s in r.regions.items():
            rows.append([r.case_id, name, f"{s.dc:.6f}", f"{s.asd:.6f}", f"{s.asd_max:.6f}"])
    return header, rows
