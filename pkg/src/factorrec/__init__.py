"""Factor-resolved graph-convolutional variational recommender with explanations."""

from .config import ConfigError, FactorConfig, RunConfig, TrainConfig, parse_config
from .graph import DatasetSplit, HeteroGraph, IdMap, build_graph, load_graph, save_graph, split_holdout
from .metrics import MetricsReport, evaluate, ndcg_at_k, recall_at_k
from .trainer import ModelCheckpoint, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FactorConfig", "RunConfig", "TrainConfig", "parse_config",
    "DatasetSplit", "HeteroGraph", "IdMap", "build_graph", "load_graph", "save_graph", "split_holdout",
    "MetricsReport", "evaluate", "ndcg_at_k", "recall_at_k",
    "ModelCheckpoint", "load_checkpoint", "save_checkpoint", "train",
]
