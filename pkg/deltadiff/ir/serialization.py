"""Model Manifest and Weights Sidecar

A model on disk is a JSON manifest plus a DTNS record file holding the
parameters. Both are written with deterministic ordering so identical graphs
produce identical bytes.
"""
from pathlib import Path
from typing import Any, Dict, Union
import json
import logging

from pydantic import ValidationError

from ..errors import IoError, MissingWeight, ParseError, UnsupportedOp
from ..models import Dialect, OpKind, PreprocessSpec
from ..tensor import read_records, write_records
from .graph import GraphInput, GraphMetadata, ModelGraph, Node, validate

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

PathLike = Union[str, Path]


def sidecar_path(manifest_path: PathLike) -> Path:
    manifest_path = Path(manifest_path)
    return manifest_path.with_name(f"{manifest_path.stem}.weights.bin")


def graph_to_manifest(graph: ModelGraph, weights_file: str) -> Dict[str, Any]:
    meta = graph.metadata
    return {
        "format": FORMAT_VERSION,
        "name": meta.name,
        "dialect": meta.dialect.value,
        "inputs": [{"name": i.name, "shape": list(i.shape)} for i in graph.inputs],
        "nodes": [
            {
                "id": n.id,
                "op": n.op.value,
                "attrs": dict(n.attrs),
                "params": dict(n.params),
                "inputs": list(n.inputs),
            }
            for n in graph.nodes
        ],
        "outputs": list(graph.outputs),
        "labels": list(meta.labels),
        "preprocess": meta.preprocess.model_dump(mode="json"),
        "fast_math": meta.fast_math,
        "passes": list(meta.passes),
        "param_map": {k: list(v) for k, v in meta.param_map.items()},
        "weights": weights_file,
    }


def save_model(graph: ModelGraph, manifest_path: PathLike) -> None:
    """Write ``graph`` as manifest + weights sidecar"""
    validate(graph)
    manifest_path = Path(manifest_path)
    weights = sidecar_path(manifest_path)
    manifest = graph_to_manifest(graph, weights.name)
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write manifest {manifest_path}: {e}") from e
    write_records(weights, sorted(graph.params.items()))
    logger.debug(f"Saved {graph.metadata.name} to {manifest_path}")


def _parse_op(value: str) -> OpKind:
    try:
        return OpKind(value)
    except ValueError:
        raise UnsupportedOp(value)


def graph_from_manifest(manifest: Dict[str, Any], params: Dict[str, Any]) -> ModelGraph:
    try:
        nodes = tuple(
            Node(
                id=str(n["id"]),
                op=_parse_op(n["op"]),
                inputs=tuple(n.get("inputs", [])),
                attrs=n.get("attrs", {}),
                params=n.get("params", {}),
            )
            for n in manifest["nodes"]
        )
        inputs = tuple(GraphInput(i["name"], tuple(int(d) for d in i["shape"])) for i in manifest["inputs"])
        metadata = GraphMetadata(
            name=manifest["name"],
            dialect=Dialect(manifest.get("dialect", Dialect.NATIVE.value)),
            labels=tuple(manifest.get("labels", [])),
            preprocess=PreprocessSpec(**manifest.get("preprocess", {})),
            fast_math=bool(manifest.get("fast_math", False)),
            passes=tuple(manifest.get("passes", [])),
            param_map={k: (v[0], v[1]) for k, v in manifest.get("param_map", {}).items()},
        )
        outputs = tuple(manifest["outputs"])
    except UnsupportedOp:
        raise
    except (KeyError, TypeError, ValueError, IndexError, ValidationError) as e:
        raise ParseError(f"Malformed manifest: {e}") from e

    referenced = {name for n in nodes for name in n.params.values()}
    for name in sorted(referenced):
        if name not in params:
            raise MissingWeight(name)
    orphans = sorted(set(params) - referenced)
    if orphans:
        logger.warning(f"Dropping {len(orphans)} unreferenced weights from {metadata.name}: {orphans}")
    kept = {name: t for name, t in params.items() if name in referenced}
    return ModelGraph(nodes=nodes, inputs=inputs, outputs=outputs, params=kept, metadata=metadata)


def load_model(manifest_path: PathLike) -> ModelGraph:
    """Read, validate and shape-check a saved model"""
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot read manifest {manifest_path}: {e}") from e
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"Manifest {manifest_path} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise ParseError(f"Manifest {manifest_path} is not a JSON object")

    weights_name = manifest.get("weights") or sidecar_path(manifest_path).name
    params = read_records(manifest_path.parent / weights_name)
    graph = graph_from_manifest(manifest, params)
    validate(graph)
    logger.debug(f"Loaded {graph.metadata.name} ({len(graph.nodes)} nodes) from {manifest_path}")
    return graph
