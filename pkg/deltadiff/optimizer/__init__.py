"""Graph Optimizer"""
from .base import GraphEditor, GraphPass, apply_transform, provenance
from .manager import LEVEL_PASSES, PASS_ORDER, apply_level, apply_pass, apply_passes, pass_list
from .passes import (
    PASSES, CanonicalizeOps, CombineParallelOps, EliminateCommonSubexpr, FastMath,
    FoldConstants, FoldScaleAxis, FuseOps, SimplifyInference, fold_batchnorm,
)

__all__ = [
    "GraphEditor",
    "GraphPass",
    "apply_transform",
    "provenance",
    "LEVEL_PASSES",
    "PASS_ORDER",
    "apply_level",
    "apply_pass",
    "apply_passes",
    "pass_list",
    "PASSES",
    "SimplifyInference",
    "FuseOps",
    "FoldConstants",
    "FoldScaleAxis",
    "EliminateCommonSubexpr",
    "CanonicalizeOps",
    "CombineParallelOps",
    "FastMath",
    "fold_batchnorm",
]
