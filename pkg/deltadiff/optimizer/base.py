"""Base Graph Pass and Rewrite Helpers"""
from abc import ABC, abstractmethod
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple
import logging

from ..errors import DeltaDiffError, InvalidGraph, ParamMapMismatch
from ..ir.graph import ModelGraph, Node, fresh_id, prune, validate
from ..models import PassId
from ..tensor import Tensor

logger = logging.getLogger(__name__)

# Parameter provenance: how a parameter was derived from a source parameter.
IDENTITY = "identity"
DENSE_TO_BMM = "dense_to_bmm"
BMM_TO_DENSE = "bmm_to_dense"
FOLDED = "folded"
COMBINED = "combined"

_INVERSES = {(DENSE_TO_BMM, BMM_TO_DENSE), (BMM_TO_DENSE, DENSE_TO_BMM)}


def compose(first: str, second: str) -> str:
    if first == IDENTITY:
        return second
    if second == IDENTITY:
        return first
    if (first, second) in _INVERSES:
        return IDENTITY
    if COMBINED in (first, second):
        return COMBINED
    return FOLDED


def provenance(graph: ModelGraph, name: str) -> Tuple[str, str]:
    """(source name, transform) of a parameter; untracked means identity"""
    return tuple(graph.metadata.param_map.get(name, (name, IDENTITY)))


def apply_transform(tensor: Tensor, transform: str) -> Tensor:
    """Re-express a source parameter the way a derived parameter stores it"""
    if transform == IDENTITY:
        return tensor
    if transform == DENSE_TO_BMM:
        return Tensor(tensor.array.T[None, :, :])
    if transform == BMM_TO_DENSE:
        return Tensor(tensor.array[0].T)
    raise ParamMapMismatch(f"Transform '{transform}' has no exact inverse")


class GraphEditor:
    """Mutable working copy of a graph used inside a single pass"""

    def __init__(self, graph: ModelGraph):
        self.source = graph
        self.nodes: List[Node] = list(graph.nodes)
        self.params: Dict[str, Tensor] = dict(graph.params)
        self.param_map: Dict[str, Tuple[str, str]] = dict(graph.metadata.param_map)
        self.outputs: List[str] = list(graph.outputs)

    # lookups ---------------------------------------------------------------
    def node(self, node_id: str) -> Optional[Node]:
        for n in self.nodes:
            if n.id == node_id:
                return n
        return None

    def consumers(self, node_id: str) -> List[str]:
        users = [n.id for n in self.nodes for src in n.inputs if src == node_id]
        users.extend("@output" for o in self.outputs if o == node_id)
        return users

    def single_consumer(self, node_id: str) -> Optional[Node]:
        users = self.consumers(node_id)
        if len(users) != 1 or users[0] == "@output":
            return None
        return self.node(users[0])

    def param(self, node: Node, role: str) -> Optional[Tensor]:
        name = node.params.get(role)
        return None if name is None else self.params[name]

    def fresh_id(self, base: str) -> str:
        return fresh_id([n.id for n in self.nodes] + self.source.input_names(), base)

    # edits -----------------------------------------------------------------
    def replace(self, node_id: str, *new_nodes: Node) -> None:
        """Swap a node for one or more nodes at the same position"""
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                self.nodes[i:i + 1] = list(new_nodes)
                return
        raise KeyError(node_id)

    def insert_before(self, node_id: str, *new_nodes: Node) -> None:
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                self.nodes[i:i] = list(new_nodes)
                return
        raise KeyError(node_id)

    def remove(self, node_id: str) -> None:
        self.nodes = [n for n in self.nodes if n.id != node_id]

    def redirect(self, old: str, new: str) -> None:
        """Point every consumer and output of ``old`` at ``new``"""
        self.nodes = [
            n.with_(inputs=[new if src == old else src for src in n.inputs]) if old in n.inputs else n
            for n in self.nodes
        ]
        self.outputs = [new if o == old else o for o in self.outputs]

    def set_param(self, name: str, tensor: Tensor, derived_from: Sequence[str] = (), transform: str = FOLDED) -> str:
        """Store a parameter, tracking what it was derived from"""
        if derived_from:
            roots = [self.param_map.get(src, (src, IDENTITY)) for src in derived_from]
            if len(roots) == 1:
                root, prior = roots[0]
                self.param_map[name] = (root, compose(prior, transform))
            else:
                self.param_map[name] = (roots[0][0], COMBINED)
        self.params[name] = tensor
        return name

    def build(self, **meta) -> ModelGraph:
        graph = self.source.with_nodes(self.nodes, params=self.params, param_map=dict(self.param_map), **meta)
        return replace(graph, outputs=tuple(self.outputs))


class GraphPass(ABC):
    """A pure graph -> graph rewrite"""

    pass_id: PassId

    def __call__(self, graph: ModelGraph) -> ModelGraph:
        try:
            validate(graph)
        except DeltaDiffError as e:
            raise InvalidGraph(f"{self.pass_id.value} precondition failed: {e}") from e

        rewritten = prune(self.run(graph))
        passes = graph.metadata.passes
        if self.pass_id.value not in passes:
            passes = passes + (self.pass_id.value,)
        rewritten = rewritten.with_metadata(passes=passes)

        try:
            validate(rewritten)
        except DeltaDiffError as e:
            raise InvalidGraph(f"{self.pass_id.value} produced an invalid graph: {e}") from e
        logger.debug(
            f"{self.pass_id.value} on {graph.metadata.name}: "
            f"{len(graph.nodes)} -> {len(rewritten.nodes)} nodes"
        )
        return rewritten

    @abstractmethod
    def run(self, graph: ModelGraph) -> ModelGraph:
        """Rewrite ``graph``; dead nodes and unreferenced params are pruned afterwards"""
        pass

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__}>"

