"""Learned alignment between embedding spaces of an old and an updated model.

Orthogonal and threshold-regularized backward maps, forward maps, the
contrastive compatibility objective, retrieval metrics and partial
backfilling, all in NumPy.
"""

from .embeddings import EmbeddingSet, PairedEmbeddings, SynthSpec, load_bundle, save_bundle, synth_pair
from .losses import LossBreakdown, LossWeights, loss_total
from .retrieval import check_definition1, cmc, compatibility_verdict, evaluate, mean_average_precision
from .trainer import TrainConfig, TrainReport, train
from .transforms import AffineMap, MlpMap, OrthogonalMap, load_map, procrustes_fit, save_map

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "EmbeddingSet",
    "LossBreakdown",
    "LossWeights",
    "MlpMap",
    "OrthogonalMap",
    "PairedEmbeddings",
    "SynthSpec",
    "TrainConfig",
    "TrainReport",
    "check_definition1",
    "cmc",
    "compatibility_verdict",
    "evaluate",
    "load_bundle",
    "load_map",
    "loss_total",
    "mean_average_precision",
    "procrustes_fit",
    "save_bundle",
    "save_map",
    "synth_pair",
    "train",
    "__version__",
]
