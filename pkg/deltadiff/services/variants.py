"""Variant Generation Service

Simulated framework conversions, conversion-fault injection (parameter noise)
and parameter-replacement repair.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union
import hashlib
import logging

import numpy as np

from ..config import BUNDLED_MODELS, ExperimentConfig
from ..errors import ConfigError, DeltaDiffError, InvalidGraph, ParamMapMismatch, UnsupportedOp
from ..ir import ModelGraph, Node, desk_model, infer_shapes, load_model, prune, validate
from ..models import Dialect, FailedVariant, NoiseSpec, OpKind, VariantSpec
from ..optimizer import GraphEditor, apply_level, apply_transform, provenance
from ..optimizer.base import DENSE_TO_BMM, IDENTITY
from ..optimizer.passes import fold_batchnorm
from ..tensor import Tensor
from .executor import worker_count

logger = logging.getLogger(__name__)

# ops a dialect has no way to express
_INEXPRESSIBLE = {
    Dialect.NATIVE: frozenset(),
    Dialect.DENSE_AS_BATCH_MATMUL: frozenset({OpKind.CONCAT}),
    Dialect.PRE_FUSED_BATCH_NORM: frozenset(),
}


# ---------------------------------------------------------------------------
# conversion
# ---------------------------------------------------------------------------

def convert(graph: ModelGraph, dialect: Dialect) -> ModelGraph:
    """Re-express a native graph in another framework dialect"""
    dialect = Dialect(dialect)
    if graph.metadata.dialect != Dialect.NATIVE:
        raise InvalidGraph(f"Can only convert native graphs, {graph.metadata.name} is {graph.metadata.dialect.value}")
    if dialect == Dialect.NATIVE:
        return graph

    for node in graph.nodes:
        if node.op in _INEXPRESSIBLE[dialect]:
            raise UnsupportedOp(
                node.op.value,
                f"{node.op.value} (node '{node.id}') cannot be expressed in the {dialect.value} dialect",
            )

    if dialect == Dialect.DENSE_AS_BATCH_MATMUL:
        converted = _dense_as_batch_matmul(graph)
    else:
        converted = _pre_fuse_batch_norm(graph)
    converted = converted.with_metadata(dialect=dialect)
    validate(converted)
    logger.debug(f"Converted {graph.metadata.name} to {dialect.value}: {len(graph.nodes)} -> {len(converted.nodes)} nodes")
    return converted


def _dense_as_batch_matmul(graph: ModelGraph) -> ModelGraph:
    # Dense(x) -> Reshape[1,N,F] -> BatchMatmul(W^T[1,F,O]) -> Add(bias) -> Reshape[N,O]
    editor = GraphEditor(graph)
    shapes = infer_shapes(graph)
    shapes.update({i.name: i.shape for i in graph.inputs})
    for node in graph.nodes:
        if node.op != OpKind.DENSE:
            continue
        n, f = shapes[node.inputs[0]]
        o = graph.param(node, "weight").shape[0]
        rows_id = editor.fresh_id(f"{node.id}_rows")
        weight_id = editor.fresh_id(f"{node.id}_weight")
        bmm_id = editor.fresh_id(f"{node.id}_bmm")
        weight = editor.set_param(
            f"{weight_id}.value",
            apply_transform(graph.param(node, "weight"), DENSE_TO_BMM),
            [node.params["weight"]],
            DENSE_TO_BMM,
        )
        chain = [
            Node.create(rows_id, OpKind.RESHAPE, [node.inputs[0]], {"shape": [1, n, f]}),
            Node.create(weight_id, OpKind.CONSTANT, params={"value": weight}),
            Node.create(bmm_id, OpKind.BATCH_MATMUL, [rows_id, weight_id]),
        ]
        last = bmm_id
        if "bias" in node.params:
            bias_id = editor.fresh_id(f"{node.id}_bias")
            add_id = editor.fresh_id(f"{node.id}_add")
            chain.append(Node.create(bias_id, OpKind.CONSTANT, params={"value": node.params["bias"]}))
            chain.append(Node.create(add_id, OpKind.ADD, [bmm_id, bias_id]))
            last = add_id
        chain.append(Node.create(node.id, OpKind.RESHAPE, [last], {"shape": [n, o]}))
        editor.replace(node.id, *chain)
    return prune(editor.build())


def _pre_fuse_batch_norm(graph: ModelGraph) -> ModelGraph:
    editor = GraphEditor(graph)
    while fold_batchnorm(editor):
        pass
    return prune(editor.build())


# ---------------------------------------------------------------------------
# fault injection
# ---------------------------------------------------------------------------

def _noise_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def _sigma_for(name: str, spec: NoiseSpec) -> float:
    if name in spec.overrides:
        return spec.overrides[name]
    layer = name.split(".", 1)[0]
    return spec.overrides.get(layer, spec.sigma)


def inject_noise(
    graph: ModelGraph,
    sigma: float,
    clamp: float = 0.011,
    seed: int = 0,
    overrides: Optional[Mapping[str, float]] = None,
) -> ModelGraph:
    """Perturb every parameter with clamped Gaussian noise

    Draws come from a Philox stream keyed by (seed, parameter name); element
    ``i`` of a parameter always receives the ``i``-th draw of its stream, so
    the result does not depend on iteration or worker order. ``overrides``
    sets sigma per parameter name or per node id.
    """
    spec = NoiseSpec(sigma=sigma, clamp=clamp, seed=seed, overrides=dict(overrides or {}))
    params: Dict[str, Tensor] = {}
    for name in sorted(graph.params):
        tensor = graph.params[name]
        s = _sigma_for(name, spec)
        if s == 0:
            params[name] = tensor
            continue
        rng = np.random.Generator(np.random.Philox(key=_noise_key(seed, name)))
        delta = np.clip(rng.standard_normal(tensor.size) * s, -clamp, clamp).astype(np.float32)
        params[name] = Tensor(tensor.flat() + delta, shape=tensor.shape)
    return graph.with_params(params)


# ---------------------------------------------------------------------------
# parameter alignment and repair
# ---------------------------------------------------------------------------

def align_parameters(target: ModelGraph, source: ModelGraph) -> List[Tuple[str, Tensor, Tensor]]:
    """Pair each target parameter with the source parameter it was derived from

    Returns ``(target name, source value in target form, target value)``.
    Raises ParamMapMismatch when a parameter cannot be traced back exactly.
    """
    pairs: List[Tuple[str, Tensor, Tensor]] = []
    covered = set()
    for name in sorted(target.params):
        value = target.params[name]
        origin = provenance(target, name)
        if name in source.params and provenance(source, name) == origin:
            expected = source.params[name]
            covered.add(name)
        else:
            src, transform = origin
            if src not in source.params or provenance(source, src)[1] != IDENTITY:
                raise ParamMapMismatch(f"Parameter '{name}' has no counterpart in {source.metadata.name}")
            expected = apply_transform(source.params[src], transform)
            covered.add(src)
        if expected.shape != value.shape:
            raise ParamMapMismatch(
                f"Parameter '{name}' has shape {list(value.shape)}, source has {list(expected.shape)}"
            )
        pairs.append((name, expected, value))
    missing = sorted(set(source.params) - covered)
    if missing:
        raise ParamMapMismatch(f"Source parameters without a target counterpart: {missing}")
    return pairs


def repair_parameters(target: ModelGraph, source: ModelGraph) -> ModelGraph:
    """Replace every target parameter with the source's exact value"""
    pairs = align_parameters(target, source)
    repaired = target.with_params({name: expected for name, expected, _ in pairs})
    logger.info(f"Repaired {len(pairs)} parameters of {target.metadata.name} from {source.metadata.name}")
    return repaired


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------

def load_model_ref(ref: Union[str, Path], seed: Optional[int] = None) -> ModelGraph:
    """A bundled desk model name or a manifest path"""
    if isinstance(ref, str) and ref in BUNDLED_MODELS:
        return desk_model(ref, seed)
    return load_model(ref)


@dataclass
class VariantSet:
    """Materialized variants of an experiment"""
    sources: Dict[str, ModelGraph] = field(default_factory=dict)
    variants: List[Tuple[VariantSpec, ModelGraph]] = field(default_factory=list)
    failed: List[FailedVariant] = field(default_factory=list)
    order: List[str] = field(default_factory=list)

    def ids(self) -> List[str]:
        """Every variant id, failed ones included, in enumeration order"""
        return list(self.order)


def noise_settings(config: ExperimentConfig) -> List[Optional[NoiseSpec]]:
    """Clean first, then one setting per configured sigma"""
    settings: List[Optional[NoiseSpec]] = [None]
    for sigma in config.noise.sigma:
        if sigma == 0 and not config.noise.overrides:
            continue
        settings.append(NoiseSpec(
            sigma=sigma, clamp=config.noise.clamp, seed=config.noise_seed, overrides=config.noise.overrides,
        ))
    return settings


def build_specs(config: ExperimentConfig, model_names: Iterable[str]) -> List[VariantSpec]:
    specs = []
    for model in model_names:
        for dialect in config.dialects:
            for noise in noise_settings(config):
                for level in config.opt.levels:
                    for backend in config.backends:
                        specs.append(VariantSpec(
                            variant_id=VariantSpec.make_id(model, dialect, noise, level, backend),
                            model=model,
                            dialect=dialect,
                            noise=noise,
                            opt_level=level,
                            enable=config.opt.enable,
                            disable=config.opt.disable,
                            backend=backend,
                        ))
    ids = [s.variant_id for s in specs]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise ConfigError(f"Duplicate variant ids: {duplicates}")
    return specs


def materialize(spec: VariantSpec, source: ModelGraph) -> ModelGraph:
    """convert -> inject noise -> optimize"""
    graph = convert(source, spec.dialect)
    if spec.noise is not None:
        graph = inject_noise(graph, spec.noise.sigma, spec.noise.clamp, spec.noise.seed, spec.noise.overrides)
    return apply_level(graph, spec.opt_level, spec.enable, spec.disable)


def enumerate_variants(
    config: ExperimentConfig,
    sources: Optional[Mapping[str, ModelGraph]] = None,
) -> VariantSet:
    """Materialize the cross product of the experiment's axes

    Failed conversions are recorded as FailedVariant entries, never raised.
    """
    result = VariantSet()
    if sources is None:
        for ref in config.models:
            graph = load_model_ref(config.model_ref(ref))
            result.sources[graph.metadata.name] = graph
    else:
        result.sources = dict(sources)
    if not result.sources:
        raise ConfigError("Experiment has no models")

    specs = build_specs(config, result.sources)
    result.order = [s.variant_id for s in specs]

    def _one(spec: VariantSpec):
        try:
            return spec, materialize(spec, result.sources[spec.model]), None
        except DeltaDiffError as e:
            return spec, None, e

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        outcomes = list(pool.map(_one, specs))

    for spec, graph, error in outcomes:
        if error is None:
            result.variants.append((spec, graph))
            logger.info(f"Materialized variant {spec.variant_id}")
        else:
            logger.warning(f"Variant {spec.variant_id} failed: {type(error).__name__}: {error}")
            result.failed.append(FailedVariant(
                variant_id=spec.variant_id, spec=spec, error=type(error).__name__, message=str(error),
            ))
    return result
