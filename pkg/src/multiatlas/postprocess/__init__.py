"""Morphological clean-up, collision resolution and level-set refinement."""

from .chain import STAGES, ChainResult, PostprocessParams, postprocess_chain
from .collisions import CollisionResult, CollisionWarning, PerceptronModel, resolve_collisions, train_perceptron
from .levelset import LevelSetParams, level_set_refine, signed_distance
from .morphology import fill_holes, remove_islands

__all__ = [
    "STAGES",
    "ChainResult",
    "CollisionResult",
    "CollisionWarning",
    "LevelSetParams",
    "PerceptronModel",
    "PostprocessParams",
    "fill_holes",
    "level_set_refine",
    "postprocess_chain",
    "remove_islands",
    "resolve_collisions",
    "signed_distance",
    "train_perceptron",
]
