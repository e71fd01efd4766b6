"""Position-aware relevance propagation for small transformer models."""

from .lrp_core import LRPConfig, backpropagate
from .model import Model, ModelConfig, PEKind, WeightStore, forward, load_model, save_model
from .pe_lrp import Method, RelevanceMap, explain

__all__ = [
    "LRPConfig",
    "Method",
    "Model",
    "ModelConfig",
    "PEKind",
    "RelevanceMap",
    "WeightStore",
    "backpropagate",
    "explain",
    "forward",
    "load_model",
    "save_model",
]
