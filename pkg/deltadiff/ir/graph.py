"""Model Graph IR

An immutable dataflow DAG of typed operator nodes plus a named parameter
store. Passes and converters build new graphs; nothing mutates in place.
"""
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
import heapq
import logging

import numpy as np

from ..errors import CyclicGraph, InvalidGraph, MissingWeight, ShapeMismatch, UnsupportedOp
from ..models import Dialect, OpKind, PreprocessSpec
from ..tensor import Tensor
from ..tensor import kernels

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class OpSchema:
    min_inputs: int
    max_inputs: Optional[int]
    attrs: Mapping[str, Any]
    params: Tuple[str, ...] = ()
    optional_params: Tuple[str, ...] = ()


_CONV_ATTRS = {"stride": [1, 1], "padding": kernels.SAME}
_POOL_ATTRS = {"kernel": [2, 2], "stride": [2, 2], "padding": kernels.VALID}

SCHEMAS: Dict[OpKind, OpSchema] = {
    OpKind.CONV2D: OpSchema(1, 1, _CONV_ATTRS, ("weight",), ("bias",)),
    OpKind.FUSED_CONV_RELU: OpSchema(1, 1, _CONV_ATTRS, ("weight",), ("bias",)),
    OpKind.DENSE: OpSchema(1, 1, {}, ("weight",), ("bias",)),
    OpKind.FUSED_DENSE_RELU: OpSchema(1, 1, {}, ("weight",), ("bias",)),
    OpKind.BATCH_MATMUL: OpSchema(2, 2, {}),
    OpKind.BATCH_NORM: OpSchema(1, 1, {"epsilon": 1e-5, "axis": 1}, ("gamma", "beta", "mean", "var")),
    OpKind.RELU: OpSchema(1, 1, {}),
    OpKind.SOFTMAX: OpSchema(1, 1, {"axis": -1}),
    OpKind.ADD: OpSchema(2, 2, {}),
    OpKind.MAX_POOL: OpSchema(1, 1, _POOL_ATTRS),
    OpKind.AVG_POOL: OpSchema(1, 1, _POOL_ATTRS),
    OpKind.GLOBAL_AVG_POOL: OpSchema(1, 1, {}),
    OpKind.RESHAPE: OpSchema(1, 1, {"shape": None}),
    OpKind.CONCAT: OpSchema(1, None, {"axis": 1}),
    OpKind.CONSTANT: OpSchema(0, 0, {}, ("value",)),
    OpKind.SCALE_CHANNELS: OpSchema(1, 1, {"axis": 1}, ("scale",)),
    OpKind.SLICE: OpSchema(1, 1, {"axis": 1, "begin": None, "end": None}),
}


@dataclass(frozen=True)
class Node:
    """One operator; ``params`` maps a role (weight, bias, ...) to a parameter name"""
    id: str
    op: OpKind
    inputs: Tuple[str, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)
    params: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        # attrs hold JSON-shaped values so save/load round-trips compare equal
        object.__setattr__(self, "attrs", {k: _thaw(v) for k, v in dict(self.attrs).items()})
        object.__setattr__(self, "params", dict(self.params))
        object.__setattr__(self, "inputs", tuple(self.inputs))

    @classmethod
    def create(
        cls,
        id: str,
        op: OpKind,
        inputs: Sequence[str] = (),
        attrs: Optional[Mapping[str, Any]] = None,
        params: Optional[Mapping[str, str]] = None,
    ) -> "Node":
        """Build a node, filling attribute defaults for its kind"""
        merged: Dict[str, Any] = {}
        for key, default in SCHEMAS[op].attrs.items():
            if default is not None:
                merged[key] = list(default) if isinstance(default, list) else default
        merged.update(attrs or {})
        return cls(id=id, op=op, inputs=tuple(inputs), attrs=merged, params=dict(params or {}))

    def with_(self, **changes: Any) -> "Node":
        if "inputs" in changes:
            changes["inputs"] = tuple(changes["inputs"])
        return replace(self, **changes)

    def signature(self) -> Tuple:
        """Kind and attributes, for structural comparison"""
        return (self.op.value, tuple(sorted((k, _freeze(v)) for k, v in self.attrs.items())))


@dataclass(frozen=True)
class GraphInput:
    name: str
    shape: Shape


@dataclass(frozen=True)
class GraphMetadata:
    name: str
    dialect: Dialect = Dialect.NATIVE
    labels: Tuple[str, ...] = ()
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    fast_math: bool = False
    passes: Tuple[str, ...] = ()
    # target param name -> (source param name, transform)
    param_map: Mapping[str, Tuple[str, str]] = field(default_factory=dict)


@dataclass(frozen=True)
class ModelGraph:
    nodes: Tuple[Node, ...]
    inputs: Tuple[GraphInput, ...]
    outputs: Tuple[str, ...]
    params: Mapping[str, Tensor]
    metadata: GraphMetadata

    def node_map(self) -> Dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def input_names(self) -> List[str]:
        return [i.name for i in self.inputs]

    def consumers(self) -> Dict[str, List[str]]:
        """Producer id -> consumer ids (graph outputs count as a consumer '@output')"""
        result: Dict[str, List[str]] = {n.id: [] for n in self.nodes}
        for name in self.input_names():
            result.setdefault(name, [])
        for n in self.nodes:
            for src in n.inputs:
                result.setdefault(src, []).append(n.id)
        for out in self.outputs:
            result.setdefault(out, []).append("@output")
        return result

    def param(self, node: Node, role: str) -> Optional[Tensor]:
        name = node.params.get(role)
        return self.params[name] if name is not None else None

    def kind_counts(self) -> Counter:
        return Counter(n.op.value for n in self.nodes)

    def with_nodes(self, nodes: Iterable[Node], params: Optional[Mapping[str, Tensor]] = None, **meta: Any) -> "ModelGraph":
        metadata = replace(self.metadata, **meta) if meta else self.metadata
        return replace(
            self,
            nodes=tuple(nodes),
            params=dict(self.params if params is None else params),
            metadata=metadata,
        )

    def with_metadata(self, **meta: Any) -> "ModelGraph":
        return replace(self, metadata=replace(self.metadata, **meta))

    def with_params(self, params: Mapping[str, Tensor]) -> "ModelGraph":
        return replace(self, params=dict(params))

    def __repr__(self) -> str:
        return f"<ModelGraph {self.metadata.name} nodes={len(self.nodes)} params={len(self.params)}>"


def _thaw(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return [_thaw(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return value.item()
    return value


def _freeze(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, dict):
        return tuple(sorted((k, _freeze(v)) for k, v in value.items()))
    return value


# ---------------------------------------------------------------------------
# ordering
# ---------------------------------------------------------------------------

def topo_sort(graph: ModelGraph) -> List[Node]:
    """Producers before consumers; ties broken by ascending node id"""
    nodes = graph.node_map()
    indegree = {node_id: 0 for node_id in nodes}
    users: Dict[str, List[str]] = {node_id: [] for node_id in nodes}
    for node in graph.nodes:
        for src in node.inputs:
            if src in nodes:
                indegree[node.id] += 1
                users[src].append(node.id)

    ready = [node_id for node_id, degree in indegree.items() if degree == 0]
    heapq.heapify(ready)
    order: List[Node] = []
    while ready:
        node_id = heapq.heappop(ready)
        order.append(nodes[node_id])
        for user in users[node_id]:
            indegree[user] -= 1
            if indegree[user] == 0:
                heapq.heappush(ready, user)

    if len(order) != len(nodes):
        stuck = sorted(node_id for node_id, degree in indegree.items() if degree > 0)
        raise CyclicGraph(f"Graph has a cycle through {stuck}")
    return order


# ---------------------------------------------------------------------------
# validation and shape inference
# ---------------------------------------------------------------------------

def check_structure(graph: ModelGraph) -> None:
    """Ids, references, arity, attributes and parameter references"""
    seen = set(graph.input_names())
    if len(seen) != len(graph.inputs):
        raise InvalidGraph("Duplicate graph input names")
    for node in graph.nodes:
        if node.id in seen:
            raise InvalidGraph("Duplicate node id", node_id=node.id)
        seen.add(node.id)
        if not isinstance(node.op, OpKind):
            raise UnsupportedOp(str(node.op))
        schema = SCHEMAS[node.op]
        arity = len(node.inputs)
        if arity < schema.min_inputs or (schema.max_inputs is not None and arity > schema.max_inputs):
            raise InvalidGraph(f"{node.op.value} takes {schema.min_inputs}..{schema.max_inputs} inputs, got {arity}", node_id=node.id)
        missing = [k for k in schema.attrs if k not in node.attrs]
        if missing:
            raise InvalidGraph(f"Missing attributes {missing}", node_id=node.id)
        for role in schema.params:
            if role not in node.params:
                raise InvalidGraph(f"Missing parameter role '{role}'", node_id=node.id)
        for role, name in node.params.items():
            if role not in schema.params + schema.optional_params:
                raise InvalidGraph(f"Unknown parameter role '{role}'", node_id=node.id)
            if name not in graph.params:
                raise MissingWeight(name)
        if node.op.is_fused and "FuseOps" not in graph.metadata.passes:
            raise InvalidGraph("Fused kind in a graph that was never fused", node_id=node.id)

    for node in graph.nodes:
        for src in node.inputs:
            if src not in seen:
                raise InvalidGraph(f"Input '{src}' does not exist", node_id=node.id)
    node_ids = {n.id for n in graph.nodes}
    if not graph.outputs:
        raise InvalidGraph("Graph has no outputs")
    for out in graph.outputs:
        if out not in node_ids:
            raise InvalidGraph(f"Output '{out}' is not a node")

    referenced = {name for n in graph.nodes for name in n.params.values()}
    orphans = sorted(set(graph.params) - referenced)
    if orphans:
        raise InvalidGraph(f"Orphan parameters: {orphans}")


def infer_shapes(graph: ModelGraph) -> Dict[str, Shape]:
    """Shape of every node's output, in topological order"""
    shapes: Dict[str, Shape] = {i.name: tuple(i.shape) for i in graph.inputs}
    for node in topo_sort(graph):
        in_shapes = []
        for src in node.inputs:
            if src not in shapes:
                raise InvalidGraph(f"Input '{src}' does not exist", node_id=node.id)
            in_shapes.append(shapes[src])
        try:
            shapes[node.id] = _node_shape(graph, node, in_shapes)
        except ShapeMismatch as e:
            if e.node_id is not None:
                raise
            raise ShapeMismatch(str(e), node_id=node.id) from e
        except (KeyError, TypeError, ValueError) as e:
            raise ShapeMismatch(f"Bad attributes: {e}", node_id=node.id) from e
    return {n.id: shapes[n.id] for n in graph.nodes}


def validate(graph: ModelGraph) -> Dict[str, Shape]:
    """Full validation; returns the inferred shapes"""
    check_structure(graph)
    shapes = infer_shapes(graph)
    labels = graph.metadata.labels
    if labels:
        out_shape = shapes[graph.outputs[0]]
        if out_shape[-1] != len(labels):
            raise ShapeMismatch(
                f"Output has {out_shape[-1]} classes but metadata lists {len(labels)} labels",
                node_id=graph.outputs[0],
            )
    return shapes


def _param_shape(graph: ModelGraph, node: Node, role: str) -> Optional[Shape]:
    t = graph.param(node, role)
    return None if t is None else t.shape


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeMismatch(message)


def _node_shape(graph: ModelGraph, node: Node, ins: List[Shape]) -> Shape:
    op = node.op
    a = node.attrs
    if op in (OpKind.CONV2D, OpKind.FUSED_CONV_RELU):
        w = _param_shape(graph, node, "weight")
        out = kernels.conv2d_output_shape(ins[0], w, a["stride"], a["padding"])
        b = _param_shape(graph, node, "bias")
        _expect(b is None or b == (w[0],), f"bias shape {b} does not match {w[0]} filters")
        return out
    if op in (OpKind.DENSE, OpKind.FUSED_DENSE_RELU):
        w = _param_shape(graph, node, "weight")
        _expect(len(ins[0]) == 2, f"Dense expects rank-2 input, got {list(ins[0])}")
        _expect(len(w) == 2 and w[1] == ins[0][1], f"Dense weights {list(w)} do not match input {list(ins[0])}")
        b = _param_shape(graph, node, "bias")
        _expect(b is None or b == (w[0],), f"bias shape {b} does not match {w[0]} outputs")
        return ins[0][0], w[0]
    if op == OpKind.BATCH_MATMUL:
        return kernels.batch_matmul_output_shape(ins[0], ins[1])
    if op == OpKind.BATCH_NORM:
        axis = kernels._normalize_axis(a["axis"], len(ins[0]))
        for role in ("gamma", "beta", "mean", "var"):
            _expect(_param_shape(graph, node, role) == (ins[0][axis],), f"BatchNorm {role} does not match {ins[0][axis]} channels")
        _expect(float(a["epsilon"]) >= 0, "BatchNorm epsilon must be >= 0")
        return ins[0]
    if op in (OpKind.RELU, OpKind.SOFTMAX):
        if op == OpKind.SOFTMAX:
            kernels._normalize_axis(a["axis"], len(ins[0]))
        return ins[0]
    if op == OpKind.ADD:
        try:
            return tuple(np.broadcast_shapes(ins[0], ins[1]))
        except ValueError:
            raise ShapeMismatch(f"Add cannot broadcast {list(ins[0])} with {list(ins[1])}")
    if op in (OpKind.MAX_POOL, OpKind.AVG_POOL):
        return kernels.pool_output_shape(ins[0], a["kernel"], a["stride"], a["padding"])
    if op == OpKind.GLOBAL_AVG_POOL:
        _expect(len(ins[0]) == 4, f"GlobalAvgPool expects rank-4 input, got {list(ins[0])}")
        return ins[0][0], ins[0][1]
    if op == OpKind.RESHAPE:
        return kernels.resolve_reshape(ins[0], a["shape"])
    if op == OpKind.CONCAT:
        return kernels.concat_output_shape(ins, a["axis"])
    if op == OpKind.CONSTANT:
        return _param_shape(graph, node, "value")
    if op == OpKind.SCALE_CHANNELS:
        axis = kernels._normalize_axis(a["axis"], len(ins[0]))
        _expect(_param_shape(graph, node, "scale") == (ins[0][axis],), f"scale does not match {ins[0][axis]} channels")
        return ins[0]
    if op == OpKind.SLICE:
        axis = kernels._normalize_axis(a["axis"], len(ins[0]))
        begin, end = int(a["begin"]), int(a["end"])
        _expect(0 <= begin < end <= ins[0][axis], f"slice [{begin}, {end}) out of range for {list(ins[0])}")
        out = list(ins[0])
        out[axis] = end - begin
        return tuple(out)
    raise UnsupportedOp(op.value)


# ---------------------------------------------------------------------------
# rewriting helpers
# ---------------------------------------------------------------------------

def prune(graph: ModelGraph) -> ModelGraph:
    """Drop nodes unreachable from the outputs and parameters nothing references"""
    nodes = graph.node_map()
    live = set()
    stack = list(graph.outputs)
    while stack:
        node_id = stack.pop()
        if node_id in live or node_id not in nodes:
            continue
        live.add(node_id)
        stack.extend(nodes[node_id].inputs)
    kept = [n for n in graph.nodes if n.id in live]
    referenced = {name for n in kept for name in n.params.values()}
    params = {name: t for name, t in graph.params.items() if name in referenced}
    param_map = {k: v for k, v in graph.metadata.param_map.items() if k in referenced}
    if len(kept) != len(graph.nodes):
        logger.debug(f"Pruned {len(graph.nodes) - len(kept)} dead nodes from {graph.metadata.name}")
    return replace(
        graph,
        nodes=tuple(kept),
        params=params,
        metadata=replace(graph.metadata, param_map=param_map),
    )


def redirect(nodes: Iterable[Node], old: str, new: str) -> List[Node]:
    """Point every consumer of ``old`` at ``new``"""
    return [
        n.with_(inputs=[new if src == old else src for src in n.inputs]) if old in n.inputs else n
        for n in nodes
    ]


def redirect_outputs(outputs: Sequence[str], old: str, new: str) -> Tuple[str, ...]:
    return tuple(new if o == old else o for o in outputs)


def fresh_id(taken: Iterable[str], base: str) -> str:
    taken = set(taken)
    if base not in taken:
        return base
    i = 1
    while f"{base}_{i}" in taken:
        i += 1
    return f"{base}_{i}"


class GraphBuilder:
    """Incremental construction of source graphs (desk models, tests)"""

    def __init__(self, name: str, labels: Sequence[str] = (), preprocess: Optional[PreprocessSpec] = None):
        self.name = name
        self.labels = tuple(labels)
        self.preprocess = preprocess or PreprocessSpec()
        self.inputs: List[GraphInput] = []
        self.nodes: List[Node] = []
        self.params: Dict[str, Tensor] = {}

    def input(self, name: str, shape: Sequence[int]) -> str:
        self.inputs.append(GraphInput(name, tuple(int(d) for d in shape)))
        return name

    def add(
        self,
        node_id: str,
        op: OpKind,
        inputs: Sequence[str] = (),
        attrs: Optional[Mapping[str, Any]] = None,
        **params: Tensor,
    ) -> str:
        refs = {}
        for role, tensor in params.items():
            if tensor is None:
                continue
            name = f"{node_id}.{role}"
            self.params[name] = tensor
            refs[role] = name
        self.nodes.append(Node.create(node_id, op, inputs, attrs, refs))
        return node_id

    def build(self, outputs: Sequence[str], dialect: Dialect = Dialect.NATIVE) -> ModelGraph:
        graph = ModelGraph(
            nodes=tuple(self.nodes),
            inputs=tuple(self.inputs),
            outputs=tuple(outputs),
            params=dict(self.params),
            metadata=GraphMetadata(
                name=self.name,
                dialect=dialect,
                labels=self.labels,
                preprocess=self.preprocess,
            ),
        )
        validate(graph)
        return graph
