"""Uniform B-spline kernels and separable tensor-product evaluation.

A displacement field on an axis-aligned lattice is written as

    u(x) = sum_{a,b,c} C[a, b, c] * B3(tx - a) * B3(ty - b) * B3(tz - c)

with ``t = (x - grid_origin) / control_spacing`` per axis and ``B3`` the
centred cubic B-spline. Derivatives are evaluated on finite differences of
the coefficients against lower-degree kernels, so a coefficient array with
vanishing second differences yields second derivatives that are exactly zero.
"""

import numpy as np


def bspline_kernel(x, degree):
    """Centred B-spline of the given degree (0..3) evaluated elementwise."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    if degree == 3:
        out = np.where(a < 1.0, 2.0 / 3.0 - a * a + 0.5 * a ** 3, 0.0)
        return np.where((a >= 1.0) & (a < 2.0), (2.0 - a) ** 3 / 6.0, out)
    if degree == 2:
        out = np.where(a < 0.5, 0.75 - a * a, 0.0)
        return np.where((a >= 0.5) & (a < 1.5), 0.5 * (a - 1.5) ** 2, out)
    if degree == 1:
        return np.where(a < 1.0, 1.0 - a, 0.0)
    if degree == 0:
        return np.where(a < 0.5, 1.0, 0.0)
    raise ValueError(f"unsupported B-spline degree {degree}")


def cubic_derivative(x):
    """First derivative of the centred cubic B-spline."""
    x = np.asarray(x, dtype=np.float64)
    return bspline_kernel(x + 0.5, 2) - bspline_kernel(x - 0.5, 2)


def basis_matrix(t, n_ctrl, order=0):
    """Dense matrix mapping differenced coefficients to the order-th derivative.

    Row ``i`` holds the weights of sample ``t[i]`` (in control-spacing units)
    against the ``n_ctrl - order`` entries of ``np.diff(coef, order)``.
    The 1/spacing**order scaling is left to the caller.
    """
    t = np.asarray(t, dtype=np.float64)
    m = np.arange(n_ctrl - order, dtype=np.float64)
    return bspline_kernel(t[:, None] - m[None, :] - 0.5 * order, 3 - order)


def contract(coef, mats):
    """Apply per-axis matrices to the three leading axes of ``coef``.

    ``coef`` has shape (a, b, c, ...) and ``mats`` are (nx, a), (ny, b),
    (nz, c). Plain einsum keeps the reduction order fixed (no BLAS).
    """
    wx, wy, wz = mats
    out = np.einsum("ia,abc...->ibc...", wx, coef)
    out = np.einsum("jb,ibc...->ijc...", wy, out)
    return np.einsum("kc,ijc...->ijk...", wz, out)


def contract_adjoint(field, mats):
    """Transpose of :func:`contract`: pulls a dense field back onto coefficients."""
    wx, wy, wz = mats
    out = np.einsum("kc,ijk...->ijc...", wz, field)
    out = np.einsum("jb,ijc...->ibc...", wy, out)
    return np.einsum("ia,ibc...->abc...", wx, out)


def diff_adjoint(g, n, axis):
    """Adjoint of ``np.diff(x, axis=axis)`` for an axis of original length ``n``."""
    g = np.moveaxis(g, axis, 0)
    out = np.zeros((n,) + g.shape[1:], dtype=np.float64)
    out[:-1] -= g
    out[1:] += g
    return np.moveaxis(out, 0, axis)


# (order_x, order_y, order_z, multiplicity) of the six unique second derivatives
SECOND_ORDER_TERMS = (
    (2, 0, 0, 1.0),
    (0, 2, 0, 1.0),
    (0, 0, 2, 1.0),
    (1, 1, 0, 2.0),
    (1, 0, 1, 2.0),
    (0, 1, 1, 2.0),
)


class SeparableSampler:
    """Caches basis matrices for a fixed lattice of sample points.

    ``axes_t`` are per-axis sample positions in control-spacing units and
    ``ctrl_dims`` the control lattice size; derivative matrices are built on
    demand and already carry the 1/spacing**order factor.
    """

    def __init__(self, axes_t, ctrl_dims, ctrl_spacing):
        self.axes_t = [np.asarray(t, dtype=np.float64) for t in axes_t]
        self.ctrl_dims = tuple(int(n) for n in ctrl_dims)
        self.ctrl_spacing = tuple(float(s) for s in ctrl_spacing)
        self._cache = {}

    def matrix(self, axis, order):
        key = (axis, order)
        if key not in self._cache:
            w = basis_matrix(self.axes_t[axis], self.ctrl_dims[axis], order)
            self._cache[key] = w / self.ctrl_spacing[axis] ** order
        return self._cache[key]

    def gram(self, axis, order):
        """(D^T W^T W D) for one axis: the sum over samples of squared derivatives as a quadratic form."""
        key = ("gram", axis, order)
        if key not in self._cache:
            n = self.ctrl_dims[axis]
            e = self.matrix(axis, order) @ np.diff(np.eye(n), n=order, axis=0)
            self._cache[key] = e.T @ e
        return self._cache[key]

    @property
    def n_samples(self):
        return int(np.prod([len(t) for t in self.axes_t]))

    def evaluate(self, coef, orders=(0, 0, 0)):
        c = coef
        for axis, order in enumerate(orders):
            if order:
                c = np.diff(c, n=order, axis=axis)
        mats = [self.matrix(axis, order) for axis, order in enumerate(orders)]
        return contract(c, mats)

    def evaluate_adjoint(self, field, orders=(0, 0, 0)):
        mats = [self.matrix(axis, order) for axis, order in enumerate(orders)]
        g = contract_adjoint(field, mats)
        for axis in reversed(range(3)):
            n = self.ctrl_dims[axis]
            for k in range(orders[axis]):
                g = diff_adjoint(g, n - orders[axis] + k + 1, axis)
        return g
