"""Island removal and hole filling on binary label maps.

Foreground components use 26-connectivity, background (holes) 6-connectivity.
"""

import numpy as np
from scipy import ndimage

FOREGROUND_CONNECTIVITY = np.ones((3, 3, 3), dtype=bool)
BACKGROUND_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def foreground_id(mask):
    ids = [k for k in mask.legend if k != 0]
    present = [int(v) for v in np.unique(mask.data) if v != 0]
    if len(present) > 1:
        raise ValueError(f"mask is not binary: labels {present}")
    if present:
        return present[0]
    return ids[0] if ids else 1


def as_mask(mask, values, fg=None):
    """LabelMap on ``mask``'s grid with ``values`` (bool) set to the mask's foreground id."""
    fg = foreground_id(mask) if fg is None else fg
    legend = dict(mask.legend)
    legend.setdefault(fg, f"label_{fg}")
    return mask.with_data(np.where(values, fg, 0), legend)


def largest_component(binary):
    """Largest 26-connected component; ties go to the component holding the
    smallest x-fastest linear voxel index."""
    labels, n = ndimage.label(binary, structure=FOREGROUND_CONNECTIVITY)
    if n <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())[1:]
    nx, ny, _ = binary.shape
    i, j, k = np.nonzero(labels)
    lin = i + nx * (j + ny * k)
    first = np.full(n, np.iinfo(np.int64).max)
    np.minimum.at(first, labels[i, j, k] - 1, lin)
    order = np.lexsort((first, -sizes))
    return labels == order[0] + 1


def remove_islands(mask):
    """Keep only the largest 26-connected foreground component."""
    binary = mask.data != 0
    if not binary.any():
        return mask
    return as_mask(mask, largest_component(binary))


def _fill_enclosed(binary):
    background = ~binary
    labels, _ = ndimage.label(background, structure=BACKGROUND_CONNECTIVITY)
    border = np.zeros_like(binary)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    outside = np.unique(labels[border & background])
    return binary | (background & ~np.isin(labels, outside))


def _close(binary):
    padded = np.pad(binary, 1)
    closed = ndimage.binary_closing(padded, structure=FOREGROUND_CONNECTIVITY)
    return closed[1:-1, 1:-1, 1:-1] | binary


def fill_holes(mask):
    """Fill background components not 6-connected to the border, then close (3x3x3).

    Closing can seal a cavity that the first fill could not reach, so the
    fill/close pair repeats until nothing changes, which also makes the
    operator idempotent.
    """
    binary = mask.data != 0
    if not binary.any():
        return mask
    current = _fill_enclosed(binary)
    while True:
        nxt = _fill_enclosed(_close(current))
        if np.array_equal(nxt, current):
            break
        current = nxt
    return as_mask(mask, current)
