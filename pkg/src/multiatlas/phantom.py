"""Synthetic vertebra + rib phantoms.

Shapes are analytic (ellipsoid body, capsule-shaped lamina and processes,
capsule ribs) in a frame centred on the grid: x lateral, y anterior, z
cranial, all in mm. Each rib starts beyond the tip of a transverse process,
separated from it by ``rib_gap`` voxels, and runs laterally and anteriorly.

Atlas diversity comes from a smooth random B-spline warp of the sampling
coordinates: a warped phantom renders the same analytic shapes at
``x + u(x)``. The noise field depends only on ``seed``, so a zero warp
reproduces the base phantom exactly.
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .nifti import write_manifest, write_nifti
from .volume import BSplineGrid, Grid, LabelMap, Volume

LEGEND = {0: "background", 1: "vertebra", 2: "rib"}
ADJACENT_LEGEND = {3: "vertebra_above", 4: "vertebra_below"}
SUBSTRUCTURES = ("VB", "TP", "SP")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (60, 44, 28)
    spacing: tuple = (1.0, 1.0, 1.0)
    body_center: tuple = (0.0, 6.0, 0.0)
    body_radii: tuple = (8.0, 6.0, 7.0)
    lamina: tuple = ((0.0, 2.0, 0.0), (0.0, -3.0, 0.0))
    lamina_radius: float = 3.0
    process_root: tuple = (0.0, -3.0, 0.0)
    process_tip: tuple = (13.0, -5.0, 0.0)  # right tip, mirrored for the left side
    process_radius: float = 2.2
    spinous_tip: tuple = (0.0, -14.0, -2.0)
    spinous_radius: float = 2.0
    rib_gap: float = 2.0  # voxels (of the finest spacing) between process tip and rib
    rib_radius: float = 2.0
    rib_length: float = 7.0
    rib_direction: tuple = (0.6, 1.0, 0.0)  # right rib; mirrored in x for the left
    adjacent: bool = False  # add neighbouring vertebral bodies above and below
    adjacent_pitch: float = 20.0
    bone: float = 400.0
    tissue: float = 40.0
    smoothing: float = 1.0  # Gaussian sigma in voxels
    noise: float = 10.0
    seed: int = 0
    warp_magnitude: float = 0.0  # std of control-point displacements, mm
    warp_spacing: float = 10.0  # control-point spacing, mm
    warp_seed: int = 0

    def __post_init__(self):
        grid = self.grid  # validates dims and spacing
        if self.rib_gap < 0:
            raise ValueError("rib_gap must be >= 0")
        if not self.bone > self.tissue:
            raise ValueError("bone intensity must exceed tissue intensity")
        if self.noise < 0 or self.smoothing < 0 or self.warp_magnitude < 0:
            raise ValueError("noise, smoothing and warp magnitude must be >= 0")
        if min(self.body_radii) <= 0 or min(self.lamina_radius, self.process_radius,
                                            self.spinous_radius, self.rib_radius) <= 0:
            raise ValueError("radii must be positive")
        half = np.asarray(grid.extent) / 2
        lo, hi = self._bounds()
        if np.any(lo < -half) or np.any(hi > half):
            raise ValueError(f"structures extend beyond the grid (need {lo}..{hi}, have +-{half})")

    @property
    def grid(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(-(n - 1) * s / 2 for n, s in zip(dims, spacing))
        return Grid(dims, spacing, origin)

    def _bounds(self):
        c, r = np.asarray(self.body_center), np.asarray(self.body_radii)
        pts = [c - r, c + r]
        for (a, b), radius in self._segments():
            pts += [a - radius, a + radius, b - radius, b + radius]
        return np.min(pts, axis=0), np.max(pts, axis=0)

    def _segments(self):
        segs = [((np.asarray(self.lamina[0]), np.asarray(self.lamina[1])), self.lamina_radius),
                ((np.asarray(self.process_root), np.asarray(self.spinous_tip)), self.spinous_radius)]
        segs += [(s, self.process_radius) for s in self.process_segments()]
        segs += [(s, self.rib_radius) for s in self.rib_segments()]
        return segs

    def process_segments(self):
        root, tip = np.asarray(self.process_root), np.asarray(self.process_tip)
        mirror = np.array([-1.0, 1.0, 1.0])
        return [(root, tip), (root * mirror, tip * mirror)]

    def rib_segments(self):
        """Rib centre lines (start, end) for the right and left side."""
        root, tip = np.asarray(self.process_root), np.asarray(self.process_tip)
        axis = (tip - root) / np.linalg.norm(tip - root)
        gap_mm = self.rib_gap * min(self.spacing)
        start = tip + axis * (self.process_radius + gap_mm + self.rib_radius)
        d = np.asarray(self.rib_direction, dtype=float)
        d = d / np.linalg.norm(d)
        end = start + self.rib_length * d
        mirror = np.array([-1.0, 1.0, 1.0])
        return [(start, end), (start * mirror, end * mirror)]

    def to_dict(self):
        d = asdict(self)
        return {k: (np.asarray(v).tolist() if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _capsule(points, a, b, radius):
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    d = points - (a + t[:, None] * ab)
    return np.einsum("ij,ij->i", d, d) <= radius ** 2


def _ellipsoid(points, center, radii):
    q = (points - np.asarray(center)) / np.asarray(radii)
    return np.einsum("ij,ij->i", q, q) <= 1.0


def _sample_points(spec):
    grid = spec.grid
    pts = grid.world_points()
    if spec.warp_magnitude > 0:
        lattice = BSplineGrid.for_domain(grid, spec.warp_spacing)
        rng = np.random.default_rng(spec.warp_seed)
        disp = rng.normal(0.0, spec.warp_magnitude, size=lattice.dims + (3,))
        field_ = lattice.with_displacements(disp).displacement_field(grid)
        pts = pts + field_.reshape(-1, 3)
    return pts


def _render(spec, pts):
    vertebra = _ellipsoid(pts, spec.body_center, spec.body_radii)
    vertebra |= _capsule(pts, np.asarray(spec.lamina[0]), np.asarray(spec.lamina[1]), spec.lamina_radius)
    vertebra |= _capsule(pts, np.asarray(spec.process_root), np.asarray(spec.spinous_tip), spec.spinous_radius)
    for a, b in spec.process_segments():
        vertebra |= _capsule(pts, a, b, spec.process_radius)
    rib = np.zeros(len(pts), dtype=bool)
    for a, b in spec.rib_segments():
        rib |= _capsule(pts, a, b, spec.rib_radius)
    labels = np.zeros(len(pts), dtype=np.int32)
    labels[rib] = 2
    labels[vertebra] = 1
    if spec.adjacent:
        for lab, sign in ((3, 1.0), (4, -1.0)):
            c = np.asarray(spec.body_center) + np.array([0.0, 0.0, sign * spec.adjacent_pitch])
            labels[_ellipsoid(pts, c, spec.body_radii) & (labels == 0)] = lab
    return labels.reshape(spec.grid.dims)


def legend_for(spec):
    return {**LEGEND, **ADJACENT_LEGEND} if spec.adjacent else dict(LEGEND)


def make_phantom(spec, coordinate_map=None):
    """Render ``spec`` into an intensity volume and a label map.

    ``coordinate_map`` (points (N, 3) -> points) optionally moves the sample
    positions after the phantom's own warp, e.g. to render the phantom under a
    known transform.
    """
    grid = spec.grid
    pts = _sample_points(spec)
    if coordinate_map is not None:
        pts = np.asarray(coordinate_map(pts), dtype=np.float64)
    labels = _render(spec, pts)
    img = np.where(labels > 0, spec.bone, spec.tissue).astype(np.float64)
    if spec.smoothing > 0:
        img = ndimage.gaussian_filter(img, spec.smoothing, mode="nearest")
    if spec.noise > 0:
        img = img + np.random.default_rng(spec.seed).normal(0.0, spec.noise, size=grid.dims)
    return Volume.on_grid(img, grid), LabelMap.on_grid(labels, grid, legend_for(spec))


def substructure_regions(spec):
    """Geometric partition of the grid into VB / TP / SP regions (bool arrays).

    VB is everything anterior of the lamina root; behind it, the central slab
    is SP and both lateral sides are TP. Regions follow the phantom's warp.
    """
    pts = _sample_points(spec).reshape(spec.grid.dims + (3,))
    y_split = float(spec.lamina[0][1]) - 1.0
    x_split = spec.lamina_radius + 1.0
    anterior = pts[..., 1] > y_split
    central = np.abs(pts[..., 0]) < x_split
    return {"VB": anterior, "TP": ~anterior & ~central, "SP": ~anterior & central}


def region_maps(spec):
    grid = spec.grid
    return {name: LabelMap.on_grid(mask.astype(np.int32), grid, {0: "background", 1: name})
            for name, mask in substructure_regions(spec).items()}


def vertebra_only(labels):
    """The same label map with rib voxels set to background."""
    rib = [k for k, v in labels.legend.items() if v == "rib"]
    data = np.where(np.isin(labels.data, rib), 0, labels.data)
    legend = {k: v for k, v in labels.legend.items() if v != "rib"}
    return labels.with_data(data, legend)


class PhantomAtlas(NamedTuple):
    image: Volume
    labels: LabelMap  # joint vertebra + rib labels
    vertebra_only: LabelMap


def member_seed(seed, i):
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def make_atlas_family(base, n, magnitude, seed):
    """``n`` phantoms from independent smooth warps of ``base`` (warp seeds derived from ``seed``)."""
    if n < 1:
        raise ValueError("need at least one atlas")
    out = []
    for i in range(n):
        spec = replace(base, warp_magnitude=float(magnitude), warp_seed=member_seed(seed, i))
        img, lab = make_phantom(spec)
        out.append(PhantomAtlas(img, lab, vertebra_only(lab)))
    return out


@dataclass
class SuiteConfig:
    base: PhantomSpec = field(default_factory=PhantomSpec)
    n_targets: int = 10
    n_atlases: int = 5
    atlas_warp: float = 1.5
    target_warp: float = 1.5
    target_overrides: dict = field(default_factory=dict)  # PhantomSpec fields changed for targets only
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        base = PhantomSpec.from_dict(d.pop("base", {}))
        cfg = cls(base=base, **d)
        PhantomSpec.from_dict({**base.to_dict(), **cfg.target_overrides})  # validate early
        return cfg

    def to_dict(self):
        return {**asdict(self), "base": self.base.to_dict()}


def write_suite(outdir, config):
    """Write atlases, targets, ground truth, substructure masks and ``manifest.json``.

    Targets use their own noise seeds and warps, disjoint from the atlas
    family's. Returns the manifest path.
    """
    os.makedirs(outdir, exist_ok=True)
    doc = {"atlases": [], "targets": []}
    for i, atlas in enumerate(make_atlas_family(config.base, config.n_atlases, config.atlas_warp, config.seed)):
        aid = f"atlas_{i:02d}"
        write_nifti(atlas.image, os.path.join(outdir, f"{aid}.nii"))
        write_nifti(atlas.labels, os.path.join(outdir, f"{aid}_labels.nii"))
        doc["atlases"].append({"id": aid, "image": f"{aid}.nii", "labels": f"{aid}_labels.nii",
                               "legend": {str(k): v for k, v in atlas.labels.legend.items()}})
    for i in range(config.n_targets):
        tid = f"case_{i:02d}"
        spec = replace(config.base, **config.target_overrides)
        spec = replace(spec, seed=member_seed(config.seed + 1, i),
                       warp_magnitude=float(config.target_warp), warp_seed=member_seed(config.seed + 2, i))
        img, lab = make_phantom(spec)
        write_nifti(img, os.path.join(outdir, f"{tid}.nii"))
        write_nifti(lab, os.path.join(outdir, f"{tid}_gt.nii"))
        entry = {"id": tid, "image": f"{tid}.nii", "ground_truth": f"{tid}_gt.nii", "substructures": {}}
        for name, region in region_maps(spec).items():
            write_nifti(region, os.path.join(outdir, f"{tid}_{name}.nii"))
            entry["substructures"][name] = f"{tid}_{name}.nii"
        doc["targets"].append(entry)
    path = os.path.join(outdir, "manifest.json")
    write_manifest(doc, path)
    return path
