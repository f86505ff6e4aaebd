"""Joint label fusion of registered atlases.

For every target voxel ``x`` each atlas gets a weight from the pairwise
dependency matrix of its local intensity residuals, ``w = M^-1 1 / 1^T M^-1 1``,
and the consensus label is the one with the largest accumulated weight.

Patches are truncated at the volume border; atlas samples displaced by a
search offset are clamped to the grid.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg, ndimage

from .volume import LabelMap, Volume


class ConditioningError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class FusionParams:
    patch_radius: int = 2
    search_radius: int = 3
    beta: float = 2.0
    epsilon: float = 0.1
    chunk: int = 2048

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")


@dataclass(frozen=True, eq=False)
class WarpedAtlas:
    intensity: Volume
    labels: LabelMap
    source_id: str = ""

    def __post_init__(self):
        if not self.intensity.grid.same_as(self.labels.grid):
            raise ValueError(f"atlas {self.source_id!r}: intensity and labels are on different grids")

    def content_key(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.intensity.data).tobytes())
        h.update(np.ascontiguousarray(self.labels.data).tobytes())
        return h.hexdigest()


def search_offsets(radius):
    """All offsets in the cube of ``radius``, nearest first, then lexicographic."""
    r = range(-radius, radius + 1)
    offs = [(a, b, c) for a in r for b in r for c in r]
    offs.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2 + o[2] ** 2, o))
    return np.array(offs, dtype=np.int64)


def _patch(shape, x, radius):
    lo = [max(0, x[a] - radius) for a in range(3)]
    hi = [min(shape[a], x[a] + radius + 1) for a in range(3)]
    return tuple(slice(l, h) for l, h in zip(lo, hi))


def _clamped_block(data, sl, offset):
    idx = [np.clip(np.arange(s.start, s.stop) + o, 0, n - 1) for s, o, n in zip(sl, offset, data.shape)]
    return data[np.ix_(*idx)]


def best_patch_offset(target, atlas, x, params=None):
    """Search offset minimising the patch SSD between target at x and atlas at x + offset."""
    params = params or FusionParams()
    x = tuple(int(v) for v in x)
    sl = _patch(target.dims, x, params.patch_radius)
    tpatch = target.data[sl]
    best, best_ssd = (0, 0, 0), np.inf
    for off in search_offsets(params.search_radius):
        apatch = _clamped_block(atlas.intensity.data, sl, off)
        ssd = float(np.sum((apatch - tpatch) ** 2))
        if ssd < best_ssd:
            best, best_ssd = tuple(int(v) for v in off), ssd
    return best


def condition(m, epsilon):
    """Add epsilon * mean(diag) to the diagonal (epsilon alone when the diagonal is zero)."""
    m = np.array(m, dtype=np.float64)
    d = float(np.mean(np.diag(m)))
    m[np.diag_indices_from(m)] += epsilon * d if d > 0 else epsilon
    return m


def dependency_matrix(target, atlases, x, params=None):
    """Conditioned pairwise dependency matrix M_x for one voxel."""
    params = params or FusionParams()
    x = tuple(int(v) for v in x)
    sl = _patch(target.dims, x, params.patch_radius)
    tpatch = target.data[sl]
    resid = []
    for atlas in atlases:
        off = best_patch_offset(target, atlas, x, params)
        resid.append(np.abs(_clamped_block(atlas.intensity.data, sl, off) - tpatch).ravel())
    r = np.array(resid)
    return condition((r @ r.T) ** params.beta, params.epsilon)


def fusion_weights(m, epsilon=0.1):
    """w = M^-1 1 / (1^T M^-1 1) through a Cholesky factorisation."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"dependency matrix must be square, got {m.shape}")
    ones = np.ones(m.shape[0])
    try:
        factor = linalg.cho_factor(m)
    except np.linalg.LinAlgError:
        try:
            factor = linalg.cho_factor(condition(m, epsilon))
        except np.linalg.LinAlgError:
            raise ConditioningError("dependency matrix is not positive definite after conditioning") from None
    w = linalg.cho_solve(factor, ones)
    return w / w.sum()


def _batch_weights(m, epsilon):
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return np.array([fusion_weights(mm, epsilon) for mm in m])
    w = np.linalg.solve(m, np.ones(m.shape[:-1] + (1,)))[..., 0]
    return w / w.sum(axis=1, keepdims=True)


def _canonical(atlases):
    return sorted(atlases, key=lambda a: a.content_key())


def _check_grid(atlases, target):
    if not atlases:
        raise ValueError("fusion needs at least one atlas")
    for a in atlases:
        if not a.intensity.grid.same_as(target.grid):
            raise ValueError(f"atlas {a.source_id!r} is not on the target grid")


def _best_offsets(tdata, adata, vox, params):
    """Best search offsets (n, K, 3) for voxel indices ``vox`` (K, 3)."""
    rp, rs = params.patch_radius, params.search_radius
    shape = np.array(tdata.shape)
    lo = np.maximum(vox.min(axis=0) - rp, 0)
    hi = np.minimum(vox.max(axis=0) + rp + 1, shape)
    region = tuple(slice(l, h) for l, h in zip(lo, hi))
    t = tdata[region]
    padded = np.pad(adata, [(0, 0)] + [(rs, rs)] * 3, mode="edge")
    rel = vox - lo
    ones = np.ones(2 * rp + 1)
    n, k = adata.shape[0], len(vox)
    best = np.full((n, k), np.inf)
    best_off = np.zeros((n, k, 3), dtype=np.int64)
    for off in search_offsets(rs):
        sl = (slice(None),) + tuple(slice(l + rs + o, h + rs + o) for l, h, o in zip(lo, hi, off))
        sq = (padded[sl] - t) ** 2
        for axis in (1, 2, 3):
            sq = ndimage.correlate1d(sq, ones, axis=axis, mode="constant", cval=0.0)
        ssd = sq[:, rel[:, 0], rel[:, 1], rel[:, 2]]
        better = ssd < best
        best[better] = ssd[better]
        best_off[better] = off
    return best_off


def _patch_deltas(radius):
    r = np.arange(-radius, radius + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def _weights_at(tdata, adata, vox, params):
    """Fusion weights (K, n) at voxel indices ``vox``."""
    shape = np.array(tdata.shape)
    offsets = _best_offsets(tdata, adata, vox, params)
    deltas = _patch_deltas(params.patch_radius)
    y = vox[:, None, :] + deltas[None, :, :]  # (K, P, 3)
    valid = np.all((y >= 0) & (y < shape), axis=-1)
    yc = np.clip(y, 0, shape - 1)
    tv = tdata[yc[..., 0], yc[..., 1], yc[..., 2]]
    n = adata.shape[0]
    resid = np.empty((len(vox), n, len(deltas)))
    for i in range(n):
        ya = np.clip(y + offsets[i][:, None, :], 0, shape - 1)
        av = adata[i][ya[..., 0], ya[..., 1], ya[..., 2]]
        resid[:, i, :] = np.where(valid, np.abs(av - tv), 0.0)
    m = np.einsum("kip,kjp->kij", resid, resid) ** params.beta
    diag = np.einsum("kii->k", m) / n
    cond = np.where(diag > 0, params.epsilon * diag, params.epsilon)
    m[:, np.arange(n), np.arange(n)] += cond[:, None]
    return _batch_weights(m, params.epsilon)


def fuse_labels(atlases, target, params=None):
    """Consensus label map over the target grid.

    Each atlas adds its weight to the label it votes at x; the label with
    the largest total wins, ties going to the smaller label id (background
    first). Atlases are processed in a content-derived order so the result
    does not depend on the order they are passed in.
    """
    params = params or FusionParams()
    _check_grid(atlases, target)
    ordered = _canonical(atlases)
    legend = {}
    for a in ordered:
        for k, v in a.labels.legend.items():
            if legend.setdefault(k, v) != v:
                raise ValueError(f"atlases disagree on the name of label {k}")
    votes = np.stack([a.labels.data for a in ordered])
    out = votes[0].copy()
    disagree = np.any(votes != votes[0], axis=0)
    vox = np.argwhere(disagree)
    if len(vox):
        tdata = np.asarray(target.data)
        adata = np.stack([a.intensity.data for a in ordered])
        label_ids = np.unique(votes[:, disagree])
        for start in range(0, len(vox), params.chunk):
            chunk = vox[start:start + params.chunk]
            w = _weights_at(tdata, adata, chunk, params)
            cv = votes[:, chunk[:, 0], chunk[:, 1], chunk[:, 2]].T  # (K, n)
            best_label = np.full(len(chunk), label_ids[0])
            best_score = np.full(len(chunk), -np.inf)
            for lab in label_ids:
                score = np.zeros(len(chunk))
                for i in range(len(ordered)):
                    score += np.where(cv[:, i] == lab, w[:, i], 0.0)
                better = score > best_score
                best_label[better] = lab
                best_score[better] = score[better]
            out[chunk[:, 0], chunk[:, 1], chunk[:, 2]] = best_label
    return LabelMap.on_grid(out, target.grid, legend)


def extract_structure(consensus, structure_id):
    """Binary mask (values 0 / structure_id) of one consensus label."""
    structure_id = int(structure_id)
    if structure_id not in consensus.legend:
        raise KeyError(f"label {structure_id} is not in the legend {consensus.legend}")
    data = np.where(consensus.data == structure_id, structure_id, 0)
    return consensus.with_data(data, {0: consensus.legend[0], structure_id: consensus.legend[structure_id]})
