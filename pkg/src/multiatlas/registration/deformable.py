"""Cubic B-spline free-form registration with a bending-energy penalty.

The objective at every pyramid level is

    C = (1 - alpha) * NMI(fixed, moving o T) - alpha * P(T)

with the NMI gradient taken analytically through the Parzen histogram and
the penalty gradient through the adjoint of the B-spline evaluation.
"""

import numpy as np

from .. import bspline
from ..volume import AffineTransform, BSplineGrid, sample_trilinear, warp_volume
from .affine import affine_register
from .params import RegistrationParams, RegistrationResult, ascend, gaussian_pyramid
from .similarity import ParzenNMI, histogram_from_values, intensity_range, nmi


def _energy(sampler, coef):
    total = 0.0
    for ox, oy, oz, mult in bspline.SECOND_ORDER_TERMS:
        d = sampler.evaluate(coef, (ox, oy, oz))
        total += mult * float(np.sum(d * d))
    return total / sampler.n_samples


def _energy_gradient(sampler, coef):
    grad = np.zeros_like(coef)
    for ox, oy, oz, mult in bspline.SECOND_ORDER_TERMS:
        d = sampler.evaluate(coef, (ox, oy, oz))
        grad += (2.0 * mult / sampler.n_samples) * sampler.evaluate_adjoint(d, (ox, oy, oz))
    return grad


def _energy_quadratic(sampler, coef):
    """Energy and gradient via per-axis Gram matrices; equal to :func:`_energy` up to rounding."""
    total = 0.0
    grad = np.zeros_like(coef)
    for ox, oy, oz, mult in bspline.SECOND_ORDER_TERMS:
        y = bspline.contract(coef, [sampler.gram(a, o) for a, o in enumerate((ox, oy, oz))])
        total += mult * float(np.sum(coef * y))
        grad += (2.0 * mult) * y
    return total / sampler.n_samples, grad / sampler.n_samples


def bending_energy(grid, image_domain):
    """Mean squared second derivative of the displacement field over ``image_domain`` voxels."""
    return _energy(grid.sampler(image_domain), np.asarray(grid.displacements))


def cost(fixed, moving, transform, params=None, kernel="box"):
    """(1 - alpha) * NMI - alpha * P; affine transforms carry no penalty.

    ``kernel`` selects the histogram used for NMI: "box" for reporting,
    "cubic" to match what the optimiser sees.
    """
    params = params or RegistrationParams()
    warped = warp_volume(moving, transform, fixed.grid)
    ranges = (intensity_range(fixed.data), intensity_range(moving.data))
    value = nmi(histogram_from_values(fixed.data.ravel(), warped.data.ravel(), params.bins, kernel, ranges))
    penalty = bending_energy(transform, fixed.grid) if isinstance(transform, BSplineGrid) else 0.0
    return (1.0 - params.alpha) * value - params.alpha * penalty


def refine_grid(grid, domain):
    """Halve the control spacing exactly (cubic subdivision) and crop to ``domain``."""
    c = np.asarray(grid.displacements)
    for axis in range(3):
        c = np.moveaxis(c, axis, 0)
        n = c.shape[0]
        out = np.empty((2 * n - 1,) + c.shape[1:])
        out[0::2] = 0.0
        out[2:-1:2] = (c[:-2] + 6.0 * c[1:-1] + c[2:]) / 8.0
        out[1::2] = 0.5 * (c[:-1] + c[1:])
        c = np.moveaxis(out[1:-1], 0, axis)
    fine = BSplineGrid.for_domain(domain, tuple(s / 2.0 for s in grid.spacing), grid.affine)
    assert np.allclose(fine.origin, np.asarray(grid.origin) + 0.5 * np.asarray(grid.spacing))
    c = c[: fine.dims[0], : fine.dims[1], : fine.dims[2]]
    return fine.with_displacements(c)


class _LevelObjective:
    def __init__(self, fixed, moving, grid, params, f_range, m_range, padding):
        self.grid = grid
        self.alpha = params.alpha
        self.padding = padding
        self.sampler = grid.sampler(fixed.grid)
        self.base = grid.affine.apply(fixed.grid.world_points())
        self.mgrid = moving.grid
        self.mdata = moving.data
        self.mgrad = np.gradient(moving.data, *moving.spacing)
        self.metric = ParzenNMI(fixed.data.ravel(), params.bins, f_range, m_range)
        self.dims = fixed.dims

    def __call__(self, coef, need_grad):
        disp = self.sampler.evaluate(coef).reshape(-1, 3)
        coords = self.mgrid.world_to_voxel(self.base + disp)
        vals = sample_trilinear(self.mdata, coords, self.padding)
        energy, energy_grad = _energy_quadratic(self.sampler, coef) if self.alpha else (0.0, 0.0)
        if not need_grad:
            return (1 - self.alpha) * self.metric.value(vals) - self.alpha * energy, None
        value, dv = self.metric.value_and_gradient(vals)
        # out-of-field samples are pinned to the padding value
        field = np.stack([sample_trilinear(g, coords, 0.0) for g in self.mgrad], axis=1)
        field *= dv[:, None]
        grad = (1 - self.alpha) * self.sampler.evaluate_adjoint(field.reshape(self.dims + (3,)))
        if self.alpha:
            grad -= self.alpha * energy_grad
        return (1 - self.alpha) * value - self.alpha * energy, grad


def _max_point_norm(g):
    return float(np.max(np.linalg.norm(g, axis=-1)))


def bspline_register(fixed, moving, init=None, params=None):
    """Coarse-to-fine B-spline registration on top of an affine initialisation.

    The control spacing at the finest level is ``params.control_spacing``
    voxels; each coarser level doubles it, and the lattice is refined by exact
    subdivision between levels.
    """
    params = params or RegistrationParams()
    init = init or AffineTransform.identity()
    f_range = intensity_range(fixed.data)
    m_range = intensity_range(moving.data)
    padding = float(moving.data.min())
    domain = fixed.grid
    finest = params.control_spacing * np.asarray(fixed.spacing)
    coarse = finest * 2 ** (params.levels - 1)

    fixed_levels = gaussian_pyramid(fixed, params.levels)
    moving_levels = gaussian_pyramid(moving, params.levels)
    grid = BSplineGrid.for_domain(domain, tuple(coarse), init)
    history = []
    converged = True
    for level, (fl, ml) in enumerate(zip(fixed_levels, moving_levels)):
        if level:
            grid = refine_grid(grid, domain)
        objective = _LevelObjective(fl, ml, grid, params, f_range, m_range, padding)
        voxel = float(min(fl.spacing))
        coef, _, ok, accepted = ascend(
            objective, np.asarray(grid.displacements),
            step0=params.step_initial * voxel,
            step_min=params.step_min * voxel,
            max_iter=params.max_iterations,
            tolerance=params.tolerance,
            grow=params.step_grow,
            shrink=params.step_shrink,
            direction_norm=_max_point_norm,
        )
        grid = grid.with_displacements(coef)
        converged = converged and ok
        history.extend((level, v) for v in accepted)
    return RegistrationResult(grid, converged, history)


def register(fixed, moving, params=None):
    """Affine then B-spline; returns (affine result, b-spline result)."""
    params = params or RegistrationParams()
    affine_result = affine_register(fixed, moving, params)
    return affine_result, bspline_register(fixed, moving, affine_result.transform, params)
