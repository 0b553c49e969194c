"""Instruction-adaptive transformation of pre-computed text embeddings."""
from .cluster import KMeansPlusPlus, kmeans_pp
from .fda import FisherDiscriminantTransformer
from .transform import GuidedSpaceTransformer, TransformModel

__version__ = "0.1.0"

__all__ = [
    "FisherDiscriminantTransformer",
    "GuidedSpaceTransformer",
    "KMeansPlusPlus",
    "TransformModel",
    "kmeans_pp",
]
