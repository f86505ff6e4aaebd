"""Slow, independent reference implementations used to check the fast code paths."""

import itertools

import numpy as np


def brute_dice(gt, seg):
    g, s = np.asarray(gt) != 0, np.asarray(seg) != 0
    total = int(g.sum()) + int(s.sum())
    if total == 0:
        return 100.0
    inter = sum(1 for idx in zip(*np.nonzero(g)) if s[idx])
    return 200.0 * inter / total


def brute_surface(mask, spacing, origin=(0.0, 0.0, 0.0)):
    """Foreground voxels with a background (or out-of-volume) face neighbour, by explicit scan."""
    m = np.asarray(mask) != 0
    pts = []
    for idx in zip(*np.nonzero(m)):
        for axis, step in itertools.product(range(3), (-1, 1)):
            nb = list(idx)
            nb[axis] += step
            if not 0 <= nb[axis] < m.shape[axis] or not m[tuple(nb)]:
                pts.append([origin[a] + idx[a] * spacing[a] for a in range(3)])
                break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def brute_distances(src, dst):
    """Nearest distance from each src point to any dst point, all pairs."""
    out = np.empty(len(src))
    for n, p in enumerate(src):
        out[n] = np.sqrt(((p[None, :] - dst) ** 2).sum(axis=1)).min()
    return out


def fd_bending_energy(grid, domain, h=1e-4):
    """Mean squared Hessian of the displacement over ``domain`` voxels by central differences.

    Off-diagonal entries enter twice, matching the six-term form.
    """
    pts = domain.world_points()
    e = np.eye(3) * h
    u0 = grid.displacement_at(pts)
    total = np.zeros(len(pts))
    for a in range(3):
        for b in range(a, 3):
            if a == b:
                d2 = (grid.displacement_at(pts + e[a]) - 2 * u0 + grid.displacement_at(pts - e[a])) / h ** 2
                total += (d2 ** 2).sum(axis=1)
            else:
                d2 = (grid.displacement_at(pts + e[a] + e[b]) - grid.displacement_at(pts + e[a] - e[b])
                      - grid.displacement_at(pts - e[a] + e[b]) + grid.displacement_at(pts - e[a] - e[b])) / (4 * h * h)
                total += 2.0 * (d2 ** 2).sum(axis=1)
    return float(total.mean())


def box_histogram(f, m, bins, f_range, m_range):
    """Joint counts by explicit per-sample rounding."""
    counts = np.zeros((bins, bins))
    for a, b in zip(np.ravel(f), np.ravel(m)):
        i = int(np.floor((a - f_range[0]) * (bins - 1) / (f_range[1] - f_range[0]) + 0.5))
        j = int(np.floor((b - m_range[0]) * (bins - 1) / (m_range[1] - m_range[0]) + 0.5))
        counts[min(max(i, 0), bins - 1), min(max(j, 0), bins - 1)] += 1
    return counts / counts.sum()


def nmi_from_counts(p):
    p = np.asarray(p, dtype=np.float64)

    def h(q):
        q = q[q > 0]
        return -float(np.sum(q * np.log(q)))

    return (h(p.sum(axis=1)) + h(p.sum(axis=0))) / h(p.ravel())
