"""Joint intensity histograms and normalized mutual information.

Intensities are rescaled linearly onto ``[0, bins - 1]`` and accumulated
either with a nearest-bin (box) kernel or a cubic B-spline Parzen window.
Parzen mass that would fall outside the histogram is folded onto the edge
bins so every sample contributes exactly unit mass.
"""

from dataclasses import dataclass

import numpy as np

from ..bspline import bspline_kernel, cubic_derivative


class DegenerateRangeError(ValueError):
    """Raised when an image has zero intensity range."""


@dataclass(frozen=True, eq=False)
class JointHistogram:
    counts: np.ndarray  # (bins, bins), fixed along axis 0, mass 1
    bins: int

    @property
    def marginal_fixed(self):
        return self.counts.sum(axis=1)

    @property
    def marginal_moving(self):
        return self.counts.sum(axis=0)


def intensity_range(values):
    lo, hi = float(np.min(values)), float(np.max(values))
    if not hi > lo:
        raise DegenerateRangeError(f"constant image (intensity {lo}) has no range to bin")
    return lo, hi


def rescale(values, value_range, bins):
    lo, hi = value_range
    v = (np.asarray(values, dtype=np.float64) - lo) * ((bins - 1) / (hi - lo))
    return np.clip(v, 0.0, bins - 1)


def box_bins(v, bins):
    return np.clip(np.floor(v + 0.5).astype(np.int64), 0, bins - 1)


def parzen_weights(v, bins, derivative=False):
    """Cubic Parzen (index, weight) pairs of shape (N, 4) for rescaled values ``v``."""
    base = np.floor(v).astype(np.int64)[:, None] + np.arange(-1, 3)[None, :]
    dist = v[:, None] - base
    w = cubic_derivative(dist) if derivative else bspline_kernel(dist, 3)
    return np.clip(base, 0, bins - 1), w


def accumulate(f_idx, f_w, m_idx, m_w, bins):
    """Joint counts from per-sample (N, k) index/weight arrays of both images."""
    flat = (f_idx[:, :, None] * bins + m_idx[:, None, :]).ravel()
    w = (f_w[:, :, None] * m_w[:, None, :]).ravel()
    counts = np.bincount(flat, weights=w, minlength=bins * bins)
    return counts.reshape(bins, bins)


def joint_histogram(fixed, warped, bins=64, kernel="cubic", ranges=None):
    """Normalised joint histogram of two volumes on the same grid.

    ``ranges`` optionally pins the (lo, hi) intensity range of each image;
    by default each image's own min/max is used.
    """
    if not fixed.grid.same_as(warped.grid):
        raise ValueError("joint_histogram needs both volumes on the same grid")
    return histogram_from_values(fixed.data.ravel(), warped.data.ravel(), bins, kernel, ranges)


def histogram_from_values(f_vals, m_vals, bins=64, kernel="cubic", ranges=None):
    if bins < 2:
        raise ValueError("need at least 2 bins")
    f_range = ranges[0] if ranges else intensity_range(f_vals)
    m_range = ranges[1] if ranges else intensity_range(m_vals)
    fv = rescale(f_vals, f_range, bins)
    mv = rescale(m_vals, m_range, bins)
    if kernel == "box":
        counts = np.bincount(box_bins(fv, bins) * bins + box_bins(mv, bins),
                             minlength=bins * bins).astype(np.float64).reshape(bins, bins)
    elif kernel == "cubic":
        fi, fw = parzen_weights(fv, bins)
        mi, mw = parzen_weights(mv, bins)
        counts = accumulate(fi, fw, mi, mw, bins)
    else:
        raise ValueError(f"unknown histogram kernel {kernel!r}")
    return JointHistogram(counts / counts.sum(), bins)


def entropy(p):
    """Shannon entropy in nats with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def nmi(hist):
    """(H(fixed) + H(moving)) / H(fixed, moving)."""
    total = hist.counts.sum()
    if not total > 0:
        raise ValueError("histogram has no mass")
    h1 = entropy(hist.marginal_fixed)
    h2 = entropy(hist.marginal_moving)
    h12 = entropy(hist.counts)
    if h12 == 0.0:
        # only a single occupied cell: both marginals are point masses too
        assert h1 == 0.0 and h2 == 0.0
        return 2.0
    return (h1 + h2) / h12


class ParzenNMI:
    """NMI of a fixed sample set against moving intensities, with analytic gradient.

    The fixed-image Parzen weights are computed once; each call bins the
    moving samples (already interpolated at the transformed positions).
    The gradient is with respect to the raw moving intensity of each sample.
    """

    def __init__(self, fixed_values, bins, fixed_range, moving_range):
        self.bins = int(bins)
        self.moving_range = moving_range
        self.scale = (self.bins - 1) / (moving_range[1] - moving_range[0])
        fv = rescale(fixed_values, fixed_range, self.bins)
        self.f_idx, self.f_w = parzen_weights(fv, self.bins)
        self.n = len(fv)

    def _hist(self, moving_values):
        mv = rescale(moving_values, self.moving_range, self.bins)
        m_idx, m_w = parzen_weights(mv, self.bins)
        counts = accumulate(self.f_idx, self.f_w, m_idx, m_w, self.bins)
        return mv, m_idx, counts / self.n

    def value(self, moving_values):
        _, _, p = self._hist(moving_values)
        return nmi(JointHistogram(p, self.bins))

    def value_and_gradient(self, moving_values):
        mv, m_idx, p = self._hist(moving_values)
        p1, p2 = p.sum(axis=1), p.sum(axis=0)
        h1, h2, h12 = entropy(p1), entropy(p2), entropy(p)
        value = (h1 + h2) / h12

        def log0(q):
            out = np.zeros_like(q)
            out[q > 0] = np.log(q[q > 0])
            return out

        # dNMI/dp_ab; constant terms cancel because each sample's mass is fixed
        g = (value * log0(p) - log0(p1)[:, None] - log0(p2)[None, :]) / h12
        dm = cubic_derivative(mv[:, None] - (np.floor(mv).astype(np.int64)[:, None] + np.arange(-1, 3)))
        gathered = g[self.f_idx[:, :, None], m_idx[:, None, :]]
        per_bin = np.einsum("nab,na,nb->n", gathered, self.f_w, dm)
        # values clipped at the range ends have zero derivative
        raw_inside = (mv > 0) & (mv < self.bins - 1)
        grad = np.where(raw_inside, per_bin * self.scale / self.n, 0.0)
        return value, grad
