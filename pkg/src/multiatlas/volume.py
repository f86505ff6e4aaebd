"""Grid geometry, intensity volumes, label maps, transforms and resampling.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. World coordinates
are axis aligned: ``world = origin + index * spacing`` (mm), no direction
cosines.

Transforms follow the pull-back convention used for resampling: a transform
maps a point of the *target* grid to the point of the *moving* image that is
sampled there, so ``warped(x) = moving(T(x))``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import bspline

# sample coordinates this close to a lattice index are snapped onto it
_SNAP_TOL = 1e-9


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise GeometryError("grids are three dimensional")
        if min(dims) < 1:
            raise GeometryError(f"dims must be >= 1, got {dims}")
        if not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise GeometryError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(origin)):
            raise GeometryError("origin must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self):
        return int(np.prod(self.dims))

    @property
    def extent(self):
        """Physical span (mm) between the first and last voxel centres."""
        return tuple((n - 1) * s for n, s in zip(self.dims, self.spacing))

    def axis_coords(self, axis):
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def world_points(self):
        """All voxel centres as an (N, 3) array in C order of the index."""
        gx, gy, gz = np.meshgrid(*(self.axis_coords(a) for a in range(3)), indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def world_to_voxel(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - np.asarray(self.origin)) / np.asarray(self.spacing)

    def index_to_world_matrix(self):
        m = np.diag(list(self.spacing) + [1.0])
        m[:3, 3] = self.origin
        return m

    def same_as(self, other):
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
                and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9))


def voxel_to_world(grid, index):
    """World position (mm) of a voxel index."""
    idx = np.asarray(index)
    if idx.shape != (3,) or not np.issubdtype(idx.dtype, np.integer):
        raise IndexError(f"voxel index must be three integers, got {index!r}")
    if np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
        raise IndexError(f"voxel index {tuple(idx)} outside dims {grid.dims}")
    return np.asarray(grid.origin) + idx * np.asarray(grid.spacing)


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise GeometryError(f"volume data must be 3-D, got shape {data.shape}")
        data = _frozen(data.astype(np.float64, copy=False))
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        grid = Grid(data.shape, self.spacing, self.origin)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "origin", grid.origin)

    @property
    def grid(self):
        return Grid(self.data.shape, self.spacing, self.origin)

    @property
    def dims(self):
        return self.data.shape

    @classmethod
    def on_grid(cls, data, grid):
        return cls(data, grid.spacing, grid.origin)


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    legend: dict = field(default_factory=lambda: {0: "background"})

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise GeometryError(f"label data must be 3-D, got shape {data.shape}")
        if data.dtype.kind == "f":
            if not np.all(data == np.round(data)):
                raise ValueError("label data must be integral")
        if data.size and data.min() < 0:
            raise ValueError("labels must be non-negative")
        data = _frozen(data.astype(np.int32))
        legend = {int(k): str(v) for k, v in self.legend.items()}
        legend.setdefault(0, "background")
        missing = sorted(set(np.unique(data).tolist()) - set(legend))
        if missing:
            raise ValueError(f"label ids {missing} are not in the legend")
        grid = Grid(data.shape, self.spacing, self.origin)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "origin", grid.origin)
        object.__setattr__(self, "legend", dict(sorted(legend.items())))

    @property
    def grid(self):
        return Grid(self.data.shape, self.spacing, self.origin)

    @property
    def dims(self):
        return self.data.shape

    @classmethod
    def on_grid(cls, data, grid, legend=None):
        return cls(data, grid.spacing, grid.origin, legend if legend is not None else {0: "background"})

    def with_data(self, data, legend=None):
        return LabelMap(data, self.spacing, self.origin, self.legend if legend is None else legend)

    def label_id(self, name):
        for k, v in self.legend.items():
            if v == name:
                return k
        raise KeyError(f"no label named {name!r} in legend {self.legend}")


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """4x4 homogeneous mm-space map from target points to moving points."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix must be finite")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) <= 1e-12:
            raise ValueError("affine linear part is singular")
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @classmethod
    def translation(cls, t):
        m = np.eye(4)
        m[:3, 3] = t
        return cls(m)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def inverse(self):
        return AffineTransform(np.linalg.inv(self.matrix))

    def compose(self, other):
        """``self`` after ``other``: x -> self(other(x))."""
        return AffineTransform(self.matrix @ other.matrix)

    def is_identity(self):
        return np.array_equal(self.matrix, np.eye(4))


@dataclass(frozen=True, eq=False)
class BSplineGrid:
    """Cubic B-spline free-form deformation on top of an affine initialisation.

    ``T(x) = affine(x) + u(x)`` where ``u`` interpolates the control-point
    displacements (mm). Control point ``(a, b, c)`` sits at
    ``origin + (a, b, c) * spacing``.
    """

    dims: tuple
    spacing: tuple
    origin: tuple
    displacements: np.ndarray = None
    affine: AffineTransform = field(default_factory=AffineTransform.identity)

    def __post_init__(self):
        grid = Grid(self.dims, self.spacing, self.origin)
        disp = self.displacements
        if disp is None:
            disp = np.zeros(grid.dims + (3,))
        disp = np.asarray(disp, dtype=np.float64)
        if disp.shape != grid.dims + (3,):
            raise ValueError(f"displacements must have shape {grid.dims + (3,)}, got {disp.shape}")
        if not np.all(np.isfinite(disp)):
            raise ValueError("control displacements must be finite")
        if min(grid.dims) < 4:
            raise GeometryError("a cubic control lattice needs at least 4 points per axis")
        object.__setattr__(self, "dims", grid.dims)
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "origin", grid.origin)
        object.__setattr__(self, "displacements", _frozen(disp))

    @classmethod
    def for_domain(cls, grid, control_spacing, affine=None, displacements=None, min_voxels=2.0):
        """Lattice covering ``grid`` with one control point of margin per side."""
        cs = np.broadcast_to(np.asarray(control_spacing, dtype=np.float64), (3,))
        if np.any(cs < min_voxels * np.asarray(grid.spacing) - 1e-9):
            raise GeometryError(
                f"control spacing {tuple(cs)} below {min_voxels} voxels of spacing {grid.spacing}")
        dims = tuple(int(np.ceil(e / s - 1e-9)) + 3 for e, s in zip(grid.extent, cs))
        origin = tuple(o - s for o, s in zip(grid.origin, cs))
        return cls(dims, tuple(cs), origin, displacements,
                   affine if affine is not None else AffineTransform.identity())

    def with_displacements(self, displacements):
        return BSplineGrid(self.dims, self.spacing, self.origin, displacements, self.affine)

    def sampler(self, grid):
        """Separable sampler for the voxel centres of ``grid``."""
        axes_t = []
        for a in range(3):
            t = (grid.axis_coords(a) - self.origin[a]) / self.spacing[a]
            if t.min() < 1.0 - 1e-9 or t.max() > self.dims[a] - 2 + 1e-9:
                raise GeometryError(f"control lattice does not cover the image domain along axis {a}")
            axes_t.append(t)
        return bspline.SeparableSampler(axes_t, self.dims, self.spacing)

    def displacement_field(self, grid):
        """Dense displacement u(x) on the voxel centres of ``grid``, shape dims + (3,)."""
        return self.sampler(grid).evaluate(self.displacements)

    def displacement_at(self, points):
        """u(x) at arbitrary points (N, 3); used for checking the separable path."""
        points = np.asarray(points, dtype=np.float64)
        t = (points - np.asarray(self.origin)) / np.asarray(self.spacing)
        out = np.zeros((len(points), 3))
        base = np.floor(t).astype(int)
        for da in range(-1, 3):
            for db in range(-1, 3):
                for dc in range(-1, 3):
                    idx = base + np.array([da, db, dc])
                    w = np.prod(bspline.bspline_kernel(t - idx, 3), axis=1)
                    ok = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
                    if np.any(ok):
                        out[ok] += w[ok, None] * self.displacements[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
        return out

    def apply_on_grid(self, grid):
        """T(x) for all voxel centres of ``grid`` as an (N, 3) array."""
        pts = self.affine.apply(grid.world_points())
        return pts + self.displacement_field(grid).reshape(-1, 3)


def _mapped_points(transform, target_grid):
    if isinstance(transform, AffineTransform):
        return transform.apply(target_grid.world_points())
    if isinstance(transform, BSplineGrid):
        return transform.apply_on_grid(target_grid)
    raise TypeError(f"unsupported transform type {type(transform).__name__}")


def _moving_coords(moving_grid, points):
    coords = moving_grid.world_to_voxel(points)
    snapped = np.round(coords)
    near = np.abs(coords - snapped) < _SNAP_TOL
    coords[near] = snapped[near]
    return coords


def _check_target(target_grid, output_grid):
    if output_grid is not None and not target_grid.same_as(output_grid):
        raise GeometryError("declared target grid does not match the requested output grid")


def sample_trilinear(data, coords, padding):
    """Trilinear samples of ``data`` at voxel coordinates (N, 3); out-of-field -> padding."""
    dims = np.asarray(data.shape)
    inside = np.all((coords >= 0) & (coords <= dims - 1), axis=1)
    out = ndimage.map_coordinates(np.asarray(data, dtype=np.float64), coords.T, order=1, mode="nearest")
    out[~inside] = padding
    return out


def warp_volume(moving, transform, target_grid, padding=None, output_grid=None):
    """Resample ``moving`` onto ``target_grid`` through ``transform`` (trilinear).

    ``padding`` defaults to the minimum intensity of ``moving``.
    """
    _check_target(target_grid, output_grid)
    if padding is None:
        padding = float(moving.data.min())
    if (isinstance(transform, AffineTransform) and transform.is_identity()
            and moving.grid.same_as(target_grid)):
        return Volume.on_grid(moving.data, target_grid)
    coords = _moving_coords(moving.grid, _mapped_points(transform, target_grid))
    vals = sample_trilinear(moving.data, coords, padding)
    return Volume.on_grid(vals.reshape(target_grid.dims), target_grid)


def warp_labels(moving, transform, target_grid, output_grid=None):
    """Nearest-neighbour resampling of a label map; out-of-field voxels get label 0."""
    _check_target(target_grid, output_grid)
    coords = _moving_coords(moving.grid, _mapped_points(transform, target_grid))
    dims = np.asarray(moving.dims)
    idx = np.floor(coords + 0.5).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(len(idx), dtype=np.int32)
    ii = idx[inside]
    out[inside] = moving.data[ii[:, 0], ii[:, 1], ii[:, 2]]
    return LabelMap.on_grid(out.reshape(target_grid.dims), target_grid, moving.legend)
