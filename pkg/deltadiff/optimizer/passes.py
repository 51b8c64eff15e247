"""Graph Optimization Passes

Each pass is a pure rewrite that leaves a valid graph behind and is
idempotent. Tolerance classes:

* bit-exact: FuseOps, EliminateCommonSubexpr, CanonicalizeOps,
  CombineParallelOps
* within 1e-5 relative: SimplifyInference, FoldConstants, FoldScaleAxis
* within 1e-3 absolute on softmax: FastMath
"""
from collections import defaultdict
from typing import Dict, List, Tuple
import hashlib
import logging

import numpy as np

from ..backends.reference import ReferenceBackend
from ..ir.graph import ModelGraph, Node, infer_shapes, topo_sort
from ..models import OpKind, PassId
from ..tensor import Tensor, kernels
from .base import BMM_TO_DENSE, COMBINED, FOLDED, GraphEditor, GraphPass

logger = logging.getLogger(__name__)

_CONV_KINDS = (OpKind.CONV2D, OpKind.FUSED_CONV_RELU)


def fold_batchnorm(editor: GraphEditor) -> bool:
    """Fold the first foldable BatchNorm into its Conv2D/Dense producer

    Returns False when no BatchNorm is left that can be folded.
    """
    for bn in list(editor.nodes):
        if bn.op != OpKind.BATCH_NORM or int(bn.attrs.get("axis", 1)) != 1:
            continue
        producer = editor.node(bn.inputs[0])
        if producer is None or producer.op not in (OpKind.CONV2D, OpKind.DENSE):
            continue
        if editor.single_consumer(producer.id) is None:
            continue

        scale, mean, beta = kernels.batchnorm_coefficients(
            editor.param(bn, "gamma"),
            editor.param(bn, "beta"),
            editor.param(bn, "mean"),
            editor.param(bn, "var"),
            float(bn.attrs["epsilon"]),
        )
        w = editor.param(producer, "weight")
        b = editor.param(producer, "bias")
        view = (-1,) + (1,) * (w.rank - 1)
        new_w = Tensor(w.array * scale.reshape(view))
        bias = b.array if b is not None else np.zeros(w.shape[0], dtype=np.float32)
        new_b = Tensor((bias - mean) * scale + beta)

        w_name = editor.set_param(producer.params["weight"], new_w, [producer.params["weight"]], FOLDED)
        b_source = producer.params["bias"] if b is not None else bn.params["beta"]
        b_name = editor.set_param(producer.params.get("bias", f"{producer.id}.bias"), new_b, [b_source], FOLDED)

        editor.replace(producer.id, producer.with_(params={"weight": w_name, "bias": b_name}))
        editor.redirect(bn.id, producer.id)
        editor.remove(bn.id)
        return True
    return False


class SimplifyInference(GraphPass):
    """Fold inference batch norm into the preceding Conv2D/Dense and drop identity reshapes"""

    pass_id = PassId.SIMPLIFY_INFERENCE

    def run(self, graph: ModelGraph) -> ModelGraph:
        editor = GraphEditor(graph)
        changed = True
        while changed:
            changed = fold_batchnorm(editor) or self._simplify_reshapes(editor)
        return editor.build()

    def _simplify_reshapes(self, editor: GraphEditor) -> bool:
        graph = editor.build()
        shapes = infer_shapes(graph)
        shapes.update({i.name: i.shape for i in graph.inputs})
        for node in editor.nodes:
            if node.op != OpKind.RESHAPE:
                continue
            src = node.inputs[0]
            if shapes[src] == shapes[node.id] and src not in graph.input_names():
                editor.redirect(node.id, src)
                editor.remove(node.id)
                return True
            inner = editor.node(src)
            if inner is not None and inner.op == OpKind.RESHAPE:
                editor.replace(node.id, node.with_(inputs=inner.inputs, attrs={"shape": list(shapes[node.id])}))
                if not editor.consumers(inner.id):
                    editor.remove(inner.id)
                return True
        return False


class FuseOps(GraphPass):
    """Conv2D -> ReLU and Dense -> ReLU become single fused nodes"""

    pass_id = PassId.FUSE_OPS

    _FUSED = {OpKind.CONV2D: OpKind.FUSED_CONV_RELU, OpKind.DENSE: OpKind.FUSED_DENSE_RELU}

    def run(self, graph: ModelGraph) -> ModelGraph:
        editor = GraphEditor(graph)
        for node_id in [n.id for n in topo_sort(graph)]:
            # earlier fusions may have rewired this node's inputs
            node = editor.node(node_id)
            if node is None or node.op not in self._FUSED:
                continue
            relu = editor.single_consumer(node.id)
            if relu is None or relu.op != OpKind.RELU:
                continue
            editor.replace(node.id, node.with_(op=self._FUSED[node.op]))
            editor.redirect(relu.id, node.id)
            editor.remove(relu.id)
        return editor.build()


class FoldConstants(GraphPass):
    """Evaluate nodes whose inputs are all constants"""

    pass_id = PassId.FOLD_CONSTANTS

    def run(self, graph: ModelGraph) -> ModelGraph:
        editor = GraphEditor(graph)
        backend = ReferenceBackend(graph)
        values: Dict[str, Tensor] = {}
        for node in topo_sort(graph):
            if node.op == OpKind.CONSTANT:
                values[node.id] = graph.param(node, "value")
                continue
            if not node.inputs or any(src not in values for src in node.inputs):
                continue
            result = backend.run_node(node, [values[src] for src in node.inputs])
            values[node.id] = result
            name = editor.set_param(f"{node.id}.value", result)
            editor.param_map[name] = (name, FOLDED)
            editor.replace(node.id, Node.create(node.id, OpKind.CONSTANT, params={"value": name}))
            logger.debug(f"Folded {node.op.value} node {node.id}")
        return editor.build()


class FoldScaleAxis(GraphPass):
    """Push per-channel ScaleChannels multiplies into adjacent conv weights"""

    pass_id = PassId.FOLD_SCALE_AXIS

    def run(self, graph: ModelGraph) -> ModelGraph:
        editor = GraphEditor(graph)
        changed = True
        while changed:
            changed = self._fold_into_consumer(editor) or self._fold_into_producer(editor)
        return editor.build()

    def _fold_into_consumer(self, editor: GraphEditor) -> bool:
        # scale(x) -> conv  ==>  conv with w[:, c] * s[c]
        for sc in list(editor.nodes):
            if sc.op != OpKind.SCALE_CHANNELS or int(sc.attrs.get("axis", 1)) != 1:
                continue
            conv = editor.single_consumer(sc.id)
            if conv is None or conv.op not in _CONV_KINDS:
                continue
            s = editor.param(sc, "scale").array
            w = editor.param(conv, "weight")
            new_w = Tensor(w.array * s[None, :, None, None])
            name = editor.set_param(conv.params["weight"], new_w, [conv.params["weight"]], FOLDED)
            params = dict(conv.params)
            params["weight"] = name
            editor.replace(conv.id, conv.with_(inputs=[sc.inputs[0]], params=params))
            editor.remove(sc.id)
            return True
        return False

    def _fold_into_producer(self, editor: GraphEditor) -> bool:
        # conv -> scale  ==>  conv with w[k] * s[k], b[k] * s[k]
        for sc in list(editor.nodes):
            if sc.op != OpKind.SCALE_CHANNELS or int(sc.attrs.get("axis", 1)) != 1:
                continue
            producer = editor.node(sc.inputs[0])
            if producer is None or producer.op not in (OpKind.CONV2D, OpKind.DENSE):
                continue
            if editor.single_consumer(producer.id) is None:
                continue
            s = editor.param(sc, "scale").array
            w = editor.param(producer, "weight")
            view = (-1,) + (1,) * (w.rank - 1)
            params = dict(producer.params)
            params["weight"] = editor.set_param(
                producer.params["weight"], Tensor(w.array * s.reshape(view)), [producer.params["weight"]], FOLDED,
            )
            b = editor.param(producer, "bias")
            if b is not None:
                params["bias"] = editor.set_param(
                    producer.params["bias"], Tensor(b.array * s), [producer.params["bias"]], FOLDED,
                )
            editor.replace(producer.id, producer.with_(params=params))
            editor.redirect(sc.id, producer.id)
            editor.remove(sc.id)
            return True
        return False


def _digest(tensor: Tensor) -> str:
    h = hashlib.sha256()
    h.update(str(tensor.shape).encode("ascii"))
    h.update(tensor.array.tobytes())
    return h.hexdigest()


class EliminateCommonSubexpr(GraphPass):
    """Merge nodes with the same kind, attributes, parameter values and inputs"""

    pass_id = PassId.ELIMINATE_COMMON_SUBEXPR

    def run(self, graph: ModelGraph) -> ModelGraph:
        editor = GraphEditor(graph)
        outputs = set(graph.outputs)
        seen: Dict[Tuple, str] = {}
        alias: Dict[str, str] = {}
        for node in topo_sort(graph):
            inputs = tuple(alias.get(src, src) for src in node.inputs)
            key = (
                node.signature(),
                inputs,
                tuple(sorted((role, _digest(graph.params[name])) for role, name in node.params.items())),
            )
            if key in seen and node.id not in outputs:
                alias[node.id] = seen[key]
                editor.redirect(node.id, seen[key])
                editor.remove(node.id)
                logger.debug(f"Merged {node.id} into {seen[key]}")
            else:
                seen.setdefault(key, node.id)
        return editor.build()


class CanonicalizeOps(GraphPass):
    """BatchMatmul against a single constant matrix becomes Dense; Add operands sorted by id"""

    pass_id = PassId.CANONICALIZE_OPS

    def run(self, graph: ModelGraph) -> ModelGraph:
        editor = GraphEditor(graph)
        shapes = infer_shapes(graph)
        shapes.update({i.name: i.shape for i in graph.inputs})
        for node in list(editor.nodes):
            if node.op == OpKind.ADD and list(node.inputs) != sorted(node.inputs):
                editor.replace(node.id, node.with_(inputs=sorted(node.inputs)))
            elif node.op == OpKind.BATCH_MATMUL:
                self._bmm_to_dense(editor, node, shapes)
        return editor.build()

    def _bmm_to_dense(self, editor: GraphEditor, node: Node, shapes) -> None:
        a_src, b_src = node.inputs
        const = editor.node(b_src)
        if const is None or const.op != OpKind.CONSTANT:
            return
        batch, m, k = shapes[a_src]
        n = shapes[b_src][2]
        if batch != 1:
            return
        matrix = editor.param(const, "value")
        flat_id = editor.fresh_id(f"{node.id}_rows")
        dense_id = editor.fresh_id(f"{node.id}_dense")
        weight = editor.set_param(
            f"{dense_id}.weight", Tensor(matrix.array[0].T), [const.params["value"]], BMM_TO_DENSE,
        )
        editor.replace(
            node.id,
            Node.create(flat_id, OpKind.RESHAPE, [a_src], {"shape": [m, k]}),
            Node.create(dense_id, OpKind.DENSE, [flat_id], params={"weight": weight}),
            Node.create(node.id, OpKind.RESHAPE, [dense_id], {"shape": [1, m, n]}),
        )


class CombineParallelOps(GraphPass):
    """Merge sibling convolutions (and sibling Dense layers) that share an input"""

    pass_id = PassId.COMBINE_PARALLEL_OPS

    def run(self, graph: ModelGraph) -> ModelGraph:
        editor = GraphEditor(graph)
        shapes = infer_shapes(graph)
        shapes.update({i.name: i.shape for i in graph.inputs})
        outputs = set(graph.outputs)

        groups: Dict[Tuple, List[Node]] = defaultdict(list)
        for node in graph.nodes:
            if node.op in _CONV_KINDS:
                w = graph.param(node, "weight")
                key = (node.inputs[0], node.signature(), w.shape[1:], "bias" in node.params)
            elif node.op == OpKind.DENSE:
                w = graph.param(node, "weight")
                key = (node.inputs[0], node.signature(), w.shape, "bias" in node.params)
            else:
                continue
            groups[key].append(node)

        for key in sorted(groups, key=lambda k: (k[0], k[1][0], min(n.id for n in groups[k]))):
            siblings = sorted(groups[key], key=lambda n: n.id)
            if len(siblings) < 2:
                continue
            if siblings[0].op == OpKind.DENSE:
                self._combine_dense(editor, siblings, shapes[siblings[0].inputs[0]])
            else:
                self._combine_conv(editor, siblings)
        return editor.build()

    def _combine_conv(self, editor: GraphEditor, siblings: List[Node]) -> None:
        first = siblings[0]
        combined_id = editor.fresh_id(f"{first.id}_combined")
        weights = [editor.param(n, "weight") for n in siblings]
        params = {
            "weight": editor.set_param(
                f"{combined_id}.weight",
                Tensor(np.concatenate([w.array for w in weights], axis=0)),
                [n.params["weight"] for n in siblings], COMBINED,
            )
        }
        if "bias" in first.params:
            params["bias"] = editor.set_param(
                f"{combined_id}.bias",
                Tensor(np.concatenate([editor.param(n, "bias").array for n in siblings])),
                [n.params["bias"] for n in siblings], COMBINED,
            )
        editor.insert_before(first.id, Node(combined_id, first.op, first.inputs, first.attrs, params))
        begin = 0
        for node, w in zip(siblings, weights):
            end = begin + w.shape[0]
            editor.replace(node.id, Node.create(node.id, OpKind.SLICE, [combined_id], {"axis": 1, "begin": begin, "end": end}))
            begin = end
        logger.debug(f"Combined {[n.id for n in siblings]} into {combined_id}")

    def _combine_dense(self, editor: GraphEditor, siblings: List[Node], in_shape) -> None:
        # x[N,F] -> G copies [G,N,F] x stacked W^T [G,F,O] -> slice per sibling
        first = siblings[0]
        n, f = in_shape
        groups = len(siblings)
        out = editor.param(first, "weight").shape[0]
        base = editor.fresh_id(f"{first.id}_combined")
        row_id = editor.fresh_id(f"{base}_rows")
        stack_id = editor.fresh_id(f"{base}_stack")
        weights_id = editor.fresh_id(f"{base}_weights")
        weights = editor.set_param(
            f"{weights_id}.value",
            Tensor(np.stack([editor.param(s, "weight").array.T for s in siblings])),
            [s.params["weight"] for s in siblings], COMBINED,
        )
        new_nodes = [
            Node.create(row_id, OpKind.RESHAPE, [first.inputs[0]], {"shape": [1, n, f]}),
            Node.create(stack_id, OpKind.CONCAT, [row_id] * groups, {"axis": 0}),
            Node.create(weights_id, OpKind.CONSTANT, params={"value": weights}),
            Node.create(base, OpKind.BATCH_MATMUL, [stack_id, weights_id]),
        ]
        editor.insert_before(first.id, *new_nodes)
        for g, node in enumerate(siblings):
            slice_id = editor.fresh_id(f"{node.id}_slice")
            flat_id = editor.fresh_id(f"{node.id}_rows") if "bias" in node.params else node.id
            replacement = [
                Node.create(slice_id, OpKind.SLICE, [base], {"axis": 0, "begin": g, "end": g + 1}),
                Node.create(flat_id, OpKind.RESHAPE, [slice_id], {"shape": [n, out]}),
            ]
            if "bias" in node.params:
                bias_id = editor.fresh_id(f"{node.id}_bias")
                replacement.append(Node.create(bias_id, OpKind.CONSTANT, params={"value": node.params["bias"]}))
                replacement.append(Node.create(node.id, OpKind.ADD, sorted([flat_id, bias_id])))
            editor.replace(node.id, *replacement)
        logger.debug(f"Combined {[n.id for n in siblings]} into batched matmul {base}")


class FastMath(GraphPass):
    """Allow polynomial exp and reassociated accumulation"""

    pass_id = PassId.FAST_MATH

    def run(self, graph: ModelGraph) -> ModelGraph:
        return graph.with_metadata(fast_math=True)


PASSES: Dict[PassId, GraphPass] = {
    p.pass_id: p
    for p in (
        SimplifyInference(),
        FuseOps(),
        FoldConstants(),
        FoldScaleAxis(),
        EliminateCommonSubexpr(),
        CanonicalizeOps(),
        CombineParallelOps(),
        FastMath(),
    )
}
