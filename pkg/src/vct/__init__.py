"""Concept tokens from images: tokenizer, detokenizer, swap loss and metrics."""
from .config import ExperimentConfig, ci_config
from .datasets import FactorSpec, MiniScene, MiniShapes
from .estimator import VisualConceptTokenizer
from .metrics import ConceptPCA
from .model import VCT

__all__ = [
    "ConceptPCA",
    "ExperimentConfig",
    "FactorSpec",
    "MiniScene",
    "MiniShapes",
    "VCT",
    "VisualConceptTokenizer",
    "ci_config",
]
__version__ = "0.1.0"
