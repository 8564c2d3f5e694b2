"""Counterfactual fine-tuning for generative next-item recommendation."""

from cftrec.corpus import Catalog, GenConfig, InteractionSample, ItemRecord, SplitDataset
from cftrec.estimator import CFTRecommender
from cftrec.objective import CftConfig, token_weights
from cftrec.textenc import Vocab

__all__ = [
    "CFTRecommender",
    "Catalog",
    "CftConfig",
    "GenConfig",
    "InteractionSample",
    "ItemRecord",
    "SplitDataset",
    "Vocab",
    "token_weights",
]

__version__ = "0.1.0"
