"""Reference Backend

Straight NCHW interpretation with the naive kernels.
"""
from ..models import Backend
from ..ir.graph import Node
from ..tensor import Tensor, kernels
from .base import BaseBackend


class ReferenceBackend(BaseBackend):
    """Reference interpreter; its outputs define correct behavior"""

    tag = Backend.REFERENCE

    def conv2d_exact(self, node: Node, x: Tensor) -> Tensor:
        return kernels.conv2d(
            x,
            self._param(node, "weight"),
            self._param(node, "bias"),
            node.attrs["stride"],
            node.attrs["padding"],
        )

    def dense_exact(self, node: Node, x: Tensor) -> Tensor:
        return kernels.dense(x, self._param(node, "weight"), self._param(node, "bias"))

    def batch_matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return kernels.batch_matmul(a, b)
