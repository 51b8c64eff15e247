"""Optimized-Layout Backend

Channels-last accumulation with weights packed once per graph. Same
accumulation order as the reference backend, so outputs are bit-identical.
"""
from typing import Dict
import logging

import numpy as np

from ..ir.graph import ModelGraph, Node
from ..models import Backend, OpKind
from ..tensor import Tensor, blocked
from .base import BaseBackend

logger = logging.getLogger(__name__)

_CONV_KINDS = (OpKind.CONV2D, OpKind.FUSED_CONV_RELU)
_DENSE_KINDS = (OpKind.DENSE, OpKind.FUSED_DENSE_RELU)


class OptimizedLayoutBackend(BaseBackend):
    """Interpreter with pre-packed CRSK / FO weights"""

    tag = Backend.OPTIMIZED_LAYOUT

    def __init__(self, graph: ModelGraph):
        super().__init__(graph)
        self._packed: Dict[str, np.ndarray] = {}
        if not self.fast_math:
            self._pack_weights()

    def _pack_weights(self) -> None:
        for node in self.graph.nodes:
            weights = self._param(node, "weight")
            if node.op in _CONV_KINDS:
                self._packed[node.id] = blocked.pack_conv_weights(weights)
            elif node.op in _DENSE_KINDS:
                self._packed[node.id] = blocked.pack_dense_weights(weights)
        logger.debug(f"Packed {len(self._packed)} weight tensors for {self.graph.metadata.name}")

    def conv2d_exact(self, node: Node, x: Tensor) -> Tensor:
        return blocked.conv2d_nhwc(
            x,
            self._param(node, "weight"),
            self._param(node, "bias"),
            node.attrs["stride"],
            node.attrs["padding"],
            packed=self._packed.get(node.id),
        )

    def dense_exact(self, node: Node, x: Tensor) -> Tensor:
        return blocked.dense_packed(
            x,
            self._param(node, "weight"),
            self._param(node, "bias"),
            packed=self._packed.get(node.id),
        )

    def batch_matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return blocked.batch_matmul_packed(a, b)
