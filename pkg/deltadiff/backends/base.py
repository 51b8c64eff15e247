"""Base Backend Interface"""
from abc import ABC, abstractmethod
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union
import logging
import time

from ..errors import OutOfMemoryBudget, ShapeMismatch, UnsupportedOp
from ..ir.graph import ModelGraph, Node, topo_sort
from ..models import Backend, OpKind, TraceEntry
from ..tensor import Tensor, kernels

logger = logging.getLogger(__name__)

Inputs = Union[Tensor, Mapping[str, Tensor]]


class BaseBackend(ABC):
    """Interpreter over a validated graph

    Subclasses supply the linear kernels (conv, dense, batched matmul and
    global pooling); everything else is shared so backends can only differ
    in memory layout, never in accumulation order. A graph flagged
    ``fast_math`` swaps in the reassociating kernels.
    """

    tag: Backend

    def __init__(self, graph: ModelGraph):
        self.graph = graph
        self.params = graph.params
        self.fast_math = graph.metadata.fast_math
        self._order: Optional[List[Node]] = None

    @property
    def order(self) -> List[Node]:
        if self._order is None:
            self._order = topo_sort(self.graph)
        return self._order

    # public API -------------------------------------------------------------
    def execute(self, inputs: Inputs) -> Tensor:
        """Run the graph and return its first output"""
        env = self._run(self._bind(inputs), None, None)
        return env[self.graph.outputs[0]]

    def execute_all(self, inputs: Inputs) -> Dict[str, Tensor]:
        env = self._run(self._bind(inputs), None, None)
        return {out: env[out] for out in self.graph.outputs}

    def trace(self, inputs: Inputs, budget_bytes: Optional[int] = None) -> Tuple[Tensor, List[TraceEntry]]:
        """Run the graph capturing every node's activation in topological order"""
        entries: List[TraceEntry] = []
        env = self._run(self._bind(inputs), entries, budget_bytes)
        return env[self.graph.outputs[0]], entries

    # interpreter loop -------------------------------------------------------
    def _bind(self, inputs: Inputs) -> Dict[str, Tensor]:
        if isinstance(inputs, Tensor):
            if len(self.graph.inputs) != 1:
                raise ShapeMismatch(f"Graph takes {len(self.graph.inputs)} inputs, got one tensor")
            inputs = {self.graph.inputs[0].name: inputs}
        env: Dict[str, Tensor] = {}
        for declared in self.graph.inputs:
            if declared.name not in inputs:
                raise ShapeMismatch(f"Missing graph input '{declared.name}'")
            value = inputs[declared.name]
            if tuple(value.shape) != tuple(declared.shape):
                raise ShapeMismatch(
                    f"Input '{declared.name}' has shape {list(value.shape)}, expected {list(declared.shape)}"
                )
            env[declared.name] = value
        return env

    def _run(
        self,
        env: Dict[str, Tensor],
        entries: Optional[List[TraceEntry]],
        budget_bytes: Optional[int],
    ) -> Dict[str, Tensor]:
        used = 0
        for index, node in enumerate(self.order):
            args = [env[src] for src in node.inputs]
            start = time.perf_counter_ns()
            out = self.run_node(node, args)
            elapsed = time.perf_counter_ns() - start
            env[node.id] = out
            if entries is not None:
                used += out.nbytes
                if budget_bytes is not None and used > budget_bytes:
                    raise OutOfMemoryBudget(
                        f"Trace of {self.graph.metadata.name} exceeds {budget_bytes} bytes at layer {index}",
                        node_id=node.id,
                    )
                entries.append(TraceEntry(index, node.id, node.op.value, out, max(elapsed, 1)))
        return env

    def _param(self, node: Node, role: str) -> Optional[Tensor]:
        name = node.params.get(role)
        return None if name is None else self.params[name]

    def run_node(self, node: Node, args: Sequence[Tensor]) -> Tensor:
        """Evaluate one node on already computed inputs"""
        op = node.op
        a = node.attrs
        if op in (OpKind.CONV2D, OpKind.FUSED_CONV_RELU):
            out = self.conv2d(node, args[0])
            return kernels.relu(out) if op == OpKind.FUSED_CONV_RELU else out
        if op in (OpKind.DENSE, OpKind.FUSED_DENSE_RELU):
            out = self.dense(node, args[0])
            return kernels.relu(out) if op == OpKind.FUSED_DENSE_RELU else out
        if op == OpKind.BATCH_MATMUL:
            if self.fast_math:
                return kernels.fast_batch_matmul(args[0], args[1])
            return self.batch_matmul(args[0], args[1])
        if op == OpKind.GLOBAL_AVG_POOL:
            if self.fast_math:
                return kernels.fast_global_avg_pool(args[0])
            return kernels.global_avg_pool(args[0])
        if op == OpKind.BATCH_NORM:
            return kernels.batchnorm(
                args[0],
                self._param(node, "gamma"),
                self._param(node, "beta"),
                self._param(node, "mean"),
                self._param(node, "var"),
                float(a["epsilon"]),
                a.get("axis", 1),
            )
        if op == OpKind.RELU:
            return kernels.relu(args[0])
        if op == OpKind.SOFTMAX:
            if self.fast_math:
                return kernels.fast_softmax(args[0], a.get("axis", -1))
            return kernels.softmax(args[0], a.get("axis", -1))
        if op == OpKind.ADD:
            return kernels.add(args[0], args[1])
        if op == OpKind.MAX_POOL:
            return kernels.maxpool(args[0], a["kernel"], a["stride"], a["padding"])
        if op == OpKind.AVG_POOL:
            return kernels.avgpool(args[0], a["kernel"], a["stride"], a["padding"])
        if op == OpKind.RESHAPE:
            return kernels.reshape(args[0], a["shape"])
        if op == OpKind.CONCAT:
            return kernels.concat(list(args), a.get("axis", 1))
        if op == OpKind.CONSTANT:
            return self._param(node, "value")
        if op == OpKind.SCALE_CHANNELS:
            return kernels.scale_channels(args[0], self._param(node, "scale"), a.get("axis", 1))
        if op == OpKind.SLICE:
            return kernels.slice_axis(args[0], a["axis"], int(a["begin"]), int(a["end"]))
        raise UnsupportedOp(op.value)

    def conv2d(self, node: Node, x: Tensor) -> Tensor:
        if self.fast_math:
            return kernels.fast_conv2d(
                x, self._param(node, "weight"), self._param(node, "bias"),
                node.attrs["stride"], node.attrs["padding"],
            )
        return self.conv2d_exact(node, x)

    def dense(self, node: Node, x: Tensor) -> Tensor:
        if self.fast_math:
            return kernels.fast_dense(x, self._param(node, "weight"), self._param(node, "bias"))
        return self.dense_exact(node, x)

    # kernels a backend must provide -----------------------------------------
    @abstractmethod
    def conv2d_exact(self, node: Node, x: Tensor) -> Tensor:
        """Convolution in the fixed C, R, S accumulation order"""
        pass

    @abstractmethod
    def dense_exact(self, node: Node, x: Tensor) -> Tensor:
        """Dense layer in the fixed F accumulation order"""
        pass

    @abstractmethod
    def batch_matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Batched matmul in the fixed K accumulation order"""
        pass

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} {self.graph.metadata.name}>"
