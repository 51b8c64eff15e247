"""Model Graph IR, Serialization and Desk Models"""
from .graph import (
    GraphBuilder, GraphInput, GraphMetadata, ModelGraph, Node, SCHEMAS,
    check_structure, infer_shapes, prune, topo_sort, validate,
)
from .serialization import load_model, save_model, sidecar_path
from .zoo import DESK_LABELS, DESK_MODELS, INPUT_SHAPE, desk_model

__all__ = [
    "GraphBuilder",
    "GraphInput",
    "GraphMetadata",
    "ModelGraph",
    "Node",
    "SCHEMAS",
    "check_structure",
    "infer_shapes",
    "prune",
    "topo_sort",
    "validate",
    "load_model",
    "save_model",
    "sidecar_path",
    "DESK_LABELS",
    "DESK_MODELS",
    "INPUT_SHAPE",
    "desk_model",
]
