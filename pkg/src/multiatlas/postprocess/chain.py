from dataclasses import asdict, dataclass, field

import numpy as np

from .collisions import resolve_collisions
from .levelset import LevelSetParams, level_set_refine
from .morphology import fill_holes, remove_islands

STAGES = ("islands", "holes", "collisions", "levelset")


@dataclass(frozen=True)
class PostprocessParams:
    levelset: LevelSetParams = field(default_factory=LevelSetParams)
    perceptron_epochs: int = 50
    refine: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        ls = LevelSetParams(**d.pop("levelset", {}))
        return cls(levelset=ls, **d)


@dataclass
class ChainResult:
    masks: list
    context: list = field(default_factory=list)
    trace: list = field(default_factory=list)  # per structure mask: {stage: LabelMap}
    collision_fallbacks: list = field(default_factory=list)


def postprocess_chain(masks, target, params=None, context=(), trace=False):
    """remove_islands -> fill_holes -> resolve_collisions -> level_set_refine.

    ``masks`` are the structures being segmented. ``context`` masks (e.g.
    ribs from a joint atlas) take part in hole filling and collision
    resolution and then act as barriers for the level set, but are neither
    island-filtered nor refined. Level sets run in list order and each one is
    barred from every other structure's current mask, so outputs stay disjoint.
    """
    params = params or PostprocessParams()
    masks, context = list(masks), list(context)
    if not masks:
        return ChainResult([], context)
    stages = [dict() for _ in masks]

    cleaned = [remove_islands(m) for m in masks]
    for s, m in zip(stages, cleaned):
        s["islands"] = m
    cleaned = [fill_holes(m) for m in cleaned]
    for s, m in zip(stages, cleaned):
        s["holes"] = m
    ctx = [fill_holes(m) for m in context]

    resolved = resolve_collisions(cleaned + ctx, target, epochs=params.perceptron_epochs)
    cleaned, ctx = resolved.masks[:len(masks)], resolved.masks[len(masks):]
    for s, m in zip(stages, cleaned):
        s["collisions"] = m

    final = list(cleaned)
    for i, m in enumerate(cleaned):
        if params.refine and np.any(m.data):
            others = [o.data != 0 for j, o in enumerate(final) if j != i] + [c.data != 0 for c in ctx]
            barrier = np.any(others, axis=0) if others else None
            final[i] = level_set_refine(m, target, params.levelset, barrier)
        stages[i]["levelset"] = final[i]
    return ChainResult(final, ctx, stages if trace else [], resolved.fallbacks)
