"""Feature-similarity transfer attacks on semantic segmentation models."""

from .attacker import AttackConfig, AttackTrace, fgsm, fspgd, pgd, project_linf, random_init
from .simcore import (
    FeatureMap,
    LossBreakdown,
    SimilarityMask,
    build_mask,
    combined_loss,
    external_similarity,
    gram,
    internal_similarity,
    normalize_pixels,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackTrace",
    "FeatureMap",
    "LossBreakdown",
    "SimilarityMask",
    "build_mask",
    "combined_loss",
    "external_similarity",
    "fgsm",
    "fspgd",
    "gram",
    "internal_similarity",
    "normalize_pixels",
    "pgd",
    "project_linf",
    "random_init",
]
