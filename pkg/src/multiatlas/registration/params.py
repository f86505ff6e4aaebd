from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from ..volume import Volume


@dataclass(frozen=True)
class RegistrationParams:
    """Settings shared by the affine and B-spline stages.

    Step sizes are in voxels of the current pyramid level; ``control_spacing``
    is in voxels of the finest level.
    """

    alpha: float = 0.005
    bins: int = 64
    levels: int = 3
    control_spacing: float = 5.0
    max_iterations: int = 60
    affine_iterations: int = 40
    tolerance: float = 1e-7
    step_initial: float = 2.0
    step_min: float = 0.02
    step_grow: float = 1.5
    step_shrink: float = 0.5
    affine_samples: int = 60000
    fd_step: float = 0.25
    symmetric_affine: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.bins < 8:
            raise ValueError(f"bins must be >= 8, got {self.bins}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.control_spacing < 2.0:
            raise ValueError("control spacing must be at least 2 voxels")
        if self.max_iterations < 0 or self.affine_iterations < 0:
            raise ValueError("iteration caps must be non-negative")
        if not 0 < self.step_min <= self.step_initial:
            raise ValueError("need 0 < step_min <= step_initial")
        if not 0 < self.step_shrink < 1 <= self.step_grow:
            raise ValueError("need 0 < step_shrink < 1 <= step_grow")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


@dataclass
class RegistrationResult:
    transform: object
    converged: bool
    history: list = field(default_factory=list)  # (level, accepted cost) pairs


def gaussian_pyramid(volume, levels):
    """Volumes from coarsest to finest; level factor 2**k with sigma 0.7*factor voxels."""
    out = []
    for k in reversed(range(levels)):
        f = 2 ** k
        if f == 1:
            out.append(volume)
            continue
        smooth = ndimage.gaussian_filter(volume.data, sigma=0.7 * f, mode="nearest")
        dec = smooth[::f, ::f, ::f]
        out.append(Volume(dec, tuple(s * f for s in volume.spacing), volume.origin))
    return out


def ascend(objective, x0, step0, step_min, max_iter, tolerance, grow, shrink, direction_norm, on_accept=None):
    """Steepest ascent with backtracking; accepted iterates never lower the objective.

    ``objective(x, need_grad)`` returns ``(value, grad)``. ``direction_norm``
    maps a gradient to the scale that the step length applies to.
    Returns (x, value, converged, accepted_values).
    """
    x = x0
    value, grad = objective(x, True)
    accepted = [value]
    step = step0
    converged = False
    for _ in range(max_iter):
        norm = direction_norm(grad)
        if not norm > 0 or not np.isfinite(norm):
            converged = True
            break
        direction = grad / norm
        improved = False
        while step >= step_min:
            trial = x + step * direction
            v, _ = objective(trial, False)
            if v > value:
                improved = True
                break
            step *= shrink
        if not improved:
            converged = True
            break
        gain = v - value
        assert v >= value, "accepted iterate lowered the cost"
        x = trial
        value, grad = objective(x, True)
        accepted.append(value)
        if on_accept is not None:
            on_accept(value)
        step = min(step * grow, step0)
        if gain < tolerance:
            converged = True
            break
    return x, value, converged, accepted
