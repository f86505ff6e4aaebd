"""Resolve voxels claimed by two structures with a per-case perceptron.

For a contested voxel x between structures a and b the features are

    [I(x) - mean_a, I(x) - mean_b, |x - c_a|, |x - c_b|]

(intensity means and centroids over each structure's uncontested voxels,
distances in mm). The perceptron is trained on the uncontested voxels of the
same two structures, labelled by owner.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .morphology import as_mask


class CollisionWarning(UserWarning):
    pass


@dataclass
class PerceptronModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    errors: list = field(default_factory=list)  # training mistakes per epoch

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise ValueError("perceptron parameters must be finite")
        if np.any(self.std <= 0):
            raise ValueError("feature scaling needs std > 0")

    def decision(self, features):
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return z @ self.weights + self.bias

    def predict(self, features):
        """+1 / -1 per row; a zero margin counts as +1."""
        return np.where(self.decision(features) >= 0, 1, -1)


def train_perceptron(features, labels, epochs=50, learning_rate=1.0):
    """Classic perceptron on z-scored features, visiting examples in the given order.

    ``labels`` are +1/-1. An example with margin <= 0 triggers
    ``w += lr * y * z`` and ``b += lr * y``; training stops after an epoch
    without mistakes or after ``epochs`` passes.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (n, d) with one label per row")
    if not set(np.unique(y).tolist()) <= {-1, 1}:
        raise ValueError("labels must be +1 or -1")
    if not (np.any(y == 1) and np.any(y == -1)):
        raise ValueError("perceptron training needs at least one example of each class")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    z = (x - mean) / std
    w = np.zeros(x.shape[1])
    b = 0.0
    history = []
    for _ in range(epochs):
        mistakes = 0
        for zi, yi in zip(z, y):
            if yi * (zi @ w + b) <= 0:
                w = w + learning_rate * yi * zi
                b = b + learning_rate * yi
                mistakes += 1
        history.append(mistakes)
        if mistakes == 0:
            break
    return PerceptronModel(w, float(b), mean, std, history)


@dataclass
class CollisionResult:
    masks: list
    fallbacks: list = field(default_factory=list)  # (a, b) pairs resolved by nearest centroid
    contested: int = 0


def _features(points, intensity, stats_a, stats_b):
    (mu_a, c_a), (mu_b, c_b) = stats_a, stats_b
    return np.column_stack([
        intensity - mu_a,
        intensity - mu_b,
        np.linalg.norm(points - c_a, axis=1),
        np.linalg.norm(points - c_b, axis=1),
    ])


def _stats(region, data, grid):
    idx = np.argwhere(region)
    pts = np.asarray(grid.origin) + idx * np.asarray(grid.spacing)
    return float(data[region].mean()), pts.mean(axis=0)


def _linear_order(idx, shape):
    # x-fastest linear index, matching the on-disk voxel order
    return np.argsort(idx[:, 0] + shape[0] * (idx[:, 1] + shape[1] * idx[:, 2]), kind="stable")


def _thin(idx, cap):
    if cap and len(idx) > cap:
        return idx[np.linspace(0, len(idx) - 1, cap).round().astype(int)]
    return idx


def resolve_collisions(masks, target, epochs=50, max_train=4000):
    """Make per-structure masks disjoint; every claimed voxel keeps exactly one owner.

    Pairs are resolved in ascending mask order, so a voxel claimed three ways
    is settled by successive pairwise decisions. A structure with no
    uncontested voxels falls back to nearest-centroid assignment over its full
    mask and the pair is reported in ``fallbacks``. At most ``max_train``
    evenly spaced uncontested voxels per structure are used for training.
    """
    if len(masks) < 2:
        return CollisionResult(list(masks))
    grid = target.grid
    for m in masks:
        if not m.grid.same_as(grid):
            raise ValueError("collision masks must share the target grid")
    claims = np.stack([m.data != 0 for m in masks])
    original = claims.copy()
    data = np.asarray(target.data)
    spacing, origin = np.asarray(grid.spacing), np.asarray(grid.origin)
    uncontested = original & (original.sum(axis=0) == 1)
    fallbacks = []
    contested_total = int(np.count_nonzero(original.sum(axis=0) > 1))
    for a in range(len(masks)):
        for b in range(a + 1, len(masks)):
            both = claims[a] & claims[b]
            if not both.any():
                continue
            idx = np.argwhere(both)
            pts = origin + idx * spacing
            vals = data[both]
            if uncontested[a].any() and uncontested[b].any():
                sa = _stats(uncontested[a], data, grid)
                sb = _stats(uncontested[b], data, grid)
                tr_a = _thin(np.argwhere(uncontested[a]), max_train)
                tr_b = _thin(np.argwhere(uncontested[b]), max_train)
                tr_idx = np.concatenate([tr_a, tr_b])
                tr_y = np.concatenate([np.ones(len(tr_a), int), -np.ones(len(tr_b), int)])
                order = _linear_order(tr_idx, data.shape)
                tr_idx, tr_y = tr_idx[order], tr_y[order]
                tr_x = _features(origin + tr_idx * spacing, data[tuple(tr_idx.T)], sa, sb)
                model = train_perceptron(tr_x, tr_y, epochs)
                a_wins = model.predict(_features(pts, vals, sa, sb)) == 1
            else:
                warnings.warn(f"structures {a} and {b}: no uncontested voxels, using nearest centroid",
                              CollisionWarning, stacklevel=2)
                fallbacks.append((a, b))
                ca = _stats(original[a], data, grid)[1]
                cb = _stats(original[b], data, grid)[1]
                a_wins = np.linalg.norm(pts - ca, axis=1) <= np.linalg.norm(pts - cb, axis=1)
            loser_a = tuple(idx[~a_wins].T)
            loser_b = tuple(idx[a_wins].T)
            claims[a][loser_a] = False
            claims[b][loser_b] = False
    out = [as_mask(m, claims[i]) for i, m in enumerate(masks)]
    return CollisionResult(out, fallbacks, contested_total)
