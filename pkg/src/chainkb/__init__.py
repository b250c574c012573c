"""Path reasoning over knowledge graphs with a recurrent relation-path encoder."""

from .kgraph import KnowledgeGraph, Path, load_entity_types, load_triples, sample_paths
from .pathmodel import ModelConfig, ModelParams, encode_path, init_params, score_path
from .pooling import PoolingKind, pool, pool_backward
from .training import TrainConfig, TrainInstance, build_dataset, train

__version__ = "0.1.0"

__all__ = [
    "KnowledgeGraph",
    "ModelConfig",
    "ModelParams",
    "Path",
    "PoolingKind",
    "TrainConfig",
    "TrainInstance",
    "build_dataset",
    "encode_path",
    "init_params",
    "load_entity_types",
    "load_triples",
    "pool",
    "pool_backward",
    "sample_paths",
    "score_path",
    "train",
]
