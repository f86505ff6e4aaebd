"""Multi-resolution 12-parameter affine registration maximising NMI.

Parameters are scaled so a unit change moves the corners of the fixed domain
by about one millimetre: translations are in mm, rotations/log-scales/shears
are divided by the domain half-diagonal. The gradient follows the chain rule:
the analytic Parzen-NMI derivative per sample, times the interpolated moving
image gradient, times the derivative of the mapped point with respect to each
parameter (the last factor by central differences of the 4x4 matrix).
"""

import numpy as np
from scipy import linalg

from ..volume import AffineTransform, sample_trilinear
from .params import RegistrationParams, RegistrationResult, ascend, gaussian_pyramid
from .similarity import ParzenNMI, intensity_range


def _rotation(rx, ry, rz):
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


def params_to_matrix(p, center, radius, t0=(0.0, 0.0, 0.0)):
    """4x4 matrix of scaled parameters about ``center``; ``t0`` is an initial translation."""
    p = np.asarray(p, dtype=np.float64)
    rot = _rotation(*(p[3:6] / radius))
    scale = np.diag(np.exp(p[6:9] / radius))
    hxy, hxz, hyz = p[9:12] / radius
    shear = np.array([[1.0, hxy, hxz], [0.0, 1.0, hyz], [0.0, 0.0, 1.0]])
    lin = rot @ shear @ scale
    c = np.asarray(center, dtype=np.float64)
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = c + p[:3] + np.asarray(t0) - lin @ c
    return m


def _centroid(volume):
    w = volume.data - volume.data.min()
    if not w.sum() > 0:
        return np.asarray(volume.grid.world_points().mean(axis=0))
    pts = [volume.grid.axis_coords(a) for a in range(3)]
    tot = w.sum()
    return np.array([
        (w.sum(axis=(1, 2)) * pts[0]).sum() / tot,
        (w.sum(axis=(0, 2)) * pts[1]).sum() / tot,
        (w.sum(axis=(0, 1)) * pts[2]).sum() / tot,
    ])


def _sample_points(volume, n_samples, rng):
    pts = volume.grid.world_points()
    vals = volume.data.ravel()
    if n_samples and len(pts) > n_samples:
        keep = np.sort(rng.choice(len(pts), size=n_samples, replace=False))
        pts, vals = pts[keep], vals[keep]
    return pts, vals


def _forward(fixed, moving, params):
    grid = fixed.grid
    center = np.asarray(grid.origin) + 0.5 * np.asarray(grid.extent)
    radius = max(0.5 * float(np.linalg.norm(grid.extent)), 1.0)
    t0 = _centroid(moving) - _centroid(fixed)
    f_range = intensity_range(fixed.data)
    m_range = intensity_range(moving.data)
    padding = float(moving.data.min())

    fixed_levels = gaussian_pyramid(fixed, params.levels)
    moving_levels = gaussian_pyramid(moving, params.levels)
    rng = np.random.default_rng(params.seed)

    p = np.zeros(12)
    history = []
    converged = True
    for level, (fl, ml) in enumerate(zip(fixed_levels, moving_levels)):
        pts, f_vals = _sample_points(fl, params.affine_samples, rng)
        metric = ParzenNMI(f_vals, params.bins, f_range, m_range)
        mgrid = ml.grid
        mdata = ml.data
        voxel = float(min(fl.spacing))
        h = params.fd_step * voxel

        mgrad = np.gradient(mdata, *ml.spacing)

        def mapped(q):
            m = params_to_matrix(q, center, radius, t0)
            return mgrid.world_to_voxel(pts @ m[:3, :3].T + m[:3, 3])

        def objective(q, need_grad):
            coords = mapped(q)
            vals = sample_trilinear(mdata, coords, padding)
            if not need_grad:
                return metric.value(vals), None
            v, dv = metric.value_and_gradient(vals)
            w = dv[:, None] * np.stack([sample_trilinear(gr, coords, 0.0) for gr in mgrad], axis=1)
            moment = w.T @ pts  # sum_n w_n x_n^T
            total = w.sum(axis=0)
            g = np.empty(12)
            for k in range(12):
                e = np.zeros(12)
                e[k] = h
                dm = (params_to_matrix(q + e, center, radius, t0) - params_to_matrix(q - e, center, radius, t0)) / (2 * h)
                g[k] = np.sum(moment * dm[:3, :3]) + total @ dm[:3, 3]
            return v, g

        p, _, ok, accepted = ascend(
            objective, p,
            step0=params.step_initial * voxel,
            step_min=params.step_min * voxel,
            max_iter=params.affine_iterations,
            tolerance=params.tolerance,
            grow=params.step_grow,
            shrink=params.step_shrink,
            direction_norm=np.linalg.norm,
        )
        converged = converged and ok
        history.extend((level, v) for v in accepted)
    return AffineTransform(params_to_matrix(p, center, radius, t0)), converged, history


def symmetric_average(forward, backward_inverse):
    """Matrix-log mean of two estimates of the same affine map."""
    la = linalg.logm(forward.matrix)
    lb = linalg.logm(backward_inverse.matrix)
    m = np.real(linalg.expm(0.5 * (la + lb)))
    m[3] = [0.0, 0.0, 0.0, 1.0]
    return AffineTransform(m)


def affine_register(fixed, moving, params=None):
    """Affine map A (fixed -> moving points) maximising NMI(fixed, moving o A).

    With ``params.symmetric_affine`` the inverse problem is solved as well and
    the two estimates are averaged in the matrix-log domain.
    """
    params = params or RegistrationParams()
    fwd, converged, history = _forward(fixed, moving, params)
    if not params.symmetric_affine:
        return RegistrationResult(fwd, converged, history)
    bwd, converged_b, _ = _forward(moving, fixed, params)
    return RegistrationResult(symmetric_average(fwd, bwd.inverse()), converged and converged_b, history)
