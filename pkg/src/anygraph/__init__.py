"""Mixture-of-experts graph foundation model on numpy/scipy.

Graphs of any size and feature width are mapped to a shared embedding space
by truncated SVD plus parameter-free propagation; a pool of MLP experts is
trained for link prediction, each graph routed to its most competent expert.
"""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .embed_init import EmbedConfig, EmbeddingCache, InitialEmbedding, initial_embedding
from .evaluation import EvalReport, evaluate, evaluate_model
from .expert_net import ModelConfig, MoEModel
from .graph_store import (
    GraphDataset,
    attach_class_nodes,
    gen_synthetic,
    load_dataset,
    normalize_adjacency,
    save_dataset,
    split_edges,
)
from .moe_router import RouterState, route
from .trainer import Trainer

__all__ = [
    "__version__",
    "Checkpoint",
    "EmbedConfig",
    "EmbeddingCache",
    "EvalReport",
    "GraphDataset",
    "InitialEmbedding",
    "ModelConfig",
    "MoEModel",
    "RouterState",
    "RunConfig",
    "TrainConfig",
    "Trainer",
    "attach_class_nodes",
    "evaluate",
    "evaluate_model",
    "gen_synthetic",
    "initial_embedding",
    "load_checkpoint",
    "load_dataset",
    "normalize_adjacency",
    "route",
    "save_checkpoint",
    "save_dataset",
    "split_edges",
]
