"""Fault Localization Service

Compares two variant packages (graph, execution record and optional per-layer
traces) and classifies the root cause of any divergence.
"""
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np

from ..config import settings
from ..errors import ParamMapMismatch, TraceMismatch
from ..ir.graph import ModelGraph, topo_sort
from ..models import (
    DiffReport, ExecutionRecord, HopVerdict, LayerDiff, ParamDiff, ParamLayerDiff, TraceEntry,
    TriangulationResult, Verdict,
)
from ..optimizer import CanonicalizeOps
from ..tensor import Tensor
from .scoring import ScoringService, compare_labels, per_class_breakdown
from .timing import compare_timing
from .variants import align_parameters

logger = logging.getLogger(__name__)

Trace = List[TraceEntry]


@dataclass
class VariantPackage:
    """Everything known about one executed variant"""
    graph: ModelGraph
    record: ExecutionRecord
    traces: Optional[Dict[str, Trace]] = None

    @property
    def variant_id(self) -> str:
        return self.record.variant_id


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def structural_differences(ga: ModelGraph, gb: ModelGraph) -> List[str]:
    """Node-kind and attribute differences after canonicalization; empty means match"""
    ca = topo_sort(CanonicalizeOps()(ga))
    cb = topo_sort(CanonicalizeOps()(gb))

    kinds_a = Counter(n.op.value for n in ca)
    kinds_b = Counter(n.op.value for n in cb)
    if kinds_a != kinds_b:
        return [
            f"{kind}: {kinds_a.get(kind, 0)} vs {kinds_b.get(kind, 0)}"
            for kind in sorted(set(kinds_a) | set(kinds_b))
            if kinds_a.get(kind, 0) != kinds_b.get(kind, 0)
        ]

    differences = []
    for index, (na, nb) in enumerate(zip(ca, cb)):
        if na.op != nb.op:
            differences.append(f"layer {index}: {na.id} is {na.op.value}, {nb.id} is {nb.op.value}")
        elif na.attrs != nb.attrs:
            changed = sorted(k for k in set(na.attrs) | set(nb.attrs) if na.attrs.get(k) != nb.attrs.get(k))
            for key in changed:
                differences.append(
                    f"layer {index} ({na.id}): {key} {na.attrs.get(key)} vs {nb.attrs.get(key)}"
                )
    return differences


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _abs_diff(a: Tensor, b: Tensor) -> np.ndarray:
    return np.abs(a.array.astype(np.float64) - b.array.astype(np.float64))


def activation_diff(ta: Trace, tb: Trace) -> List[LayerDiff]:
    """Per-layer mean, max and std of the elementwise |a - b|"""
    if len(ta) != len(tb):
        raise TraceMismatch(f"Traces have {len(ta)} and {len(tb)} layers")
    stats = []
    for ea, eb in zip(ta, tb):
        if ea.op != eb.op:
            raise TraceMismatch(f"Layer {ea.layer_index} is {ea.op} in one trace and {eb.op} in the other")
        if ea.activation.shape != eb.activation.shape:
            raise TraceMismatch(
                f"Layer {ea.layer_index} ({ea.node_id}) has shapes {list(ea.activation.shape)} "
                f"and {list(eb.activation.shape)}"
            )
        delta = _abs_diff(ea.activation, eb.activation)
        stats.append(LayerDiff(
            layer_index=ea.layer_index,
            node_id=ea.node_id,
            mean=float(delta.mean()),
            max=float(delta.max()),
            std=float(delta.std()),
        ))
    return stats


def activation_diff_by_image(
    traces_a: Dict[str, Trace],
    traces_b: Dict[str, Trace],
) -> Dict[str, List[LayerDiff]]:
    missing = sorted(set(traces_a) ^ set(traces_b))
    if missing:
        raise TraceMismatch(f"Traces cover different images, e.g. {missing[0]}")
    return {image_id: activation_diff(traces_a[image_id], traces_b[image_id]) for image_id in sorted(traces_a)}


def mean_profile(profiles: Sequence[List[LayerDiff]]) -> List[LayerDiff]:
    """Average per-layer statistics over images; max is the max over images"""
    if not profiles:
        return []
    merged = []
    for layers in zip(*profiles):
        first = layers[0]
        merged.append(LayerDiff(
            layer_index=first.layer_index,
            node_id=first.node_id,
            mean=float(np.mean([l.mean for l in layers])),
            max=float(np.max([l.max for l in layers])),
            std=float(np.mean([l.std for l in layers])),
        ))
    return merged


def onset_layer(profile: Sequence[LayerDiff], threshold: float) -> Optional[int]:
    for layer in profile:
        if layer.mean > threshold:
            return layer.layer_index
    return None


def _logit_traces(record: ExecutionRecord) -> Dict[str, Trace]:
    """Final outputs as a one-layer trace, for records without debug traces"""
    return {
        image.image_id: [TraceEntry(0, "output", "Output", Tensor(image.logits), 1)]
        for image in record.images
    }


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def parameter_diff(ga: ModelGraph, gb: ModelGraph) -> ParamDiff:
    """Mean and max |delta| over every parameter element, and how many elements differ"""
    pairs = align_parameters(gb, ga)
    if not pairs:
        return ParamDiff()
    deltas = np.concatenate([_abs_diff(expected, value).reshape(-1) for _, expected, value in pairs])
    return ParamDiff(
        mean=float(deltas.mean()),
        max=float(deltas.max()),
        count=int(np.count_nonzero(deltas)),
    )


def parameter_diff_by_layer(ga: ModelGraph, gb: ModelGraph) -> List[ParamLayerDiff]:
    """Parameter deltas grouped by the node of ``gb`` that owns them, in topological order"""
    deltas = {name: _abs_diff(expected, value) for name, expected, value in align_parameters(gb, ga)}
    rows = []
    for index, node in enumerate(topo_sort(gb)):
        owned = [deltas[name] for name in node.params.values() if name in deltas]
        if not owned:
            continue
        flat = np.concatenate([d.reshape(-1) for d in owned])
        rows.append(ParamLayerDiff(layer_index=index, node_id=node.id, mean=float(flat.mean()), max=float(flat.max())))
    return rows


# ---------------------------------------------------------------------------
# verdicts
# ---------------------------------------------------------------------------

def localize(
    source: VariantPackage,
    target: VariantPackage,
    threshold: Optional[float] = None,
    rbo_p: Optional[float] = None,
    labels: Optional[Dict[str, int]] = None,
    label_names: Sequence[str] = (),
) -> DiffReport:
    """Compare two packages and attribute any divergence

    Structure is checked first, then parameters, then activations (or final
    outputs when either side has no traces); the first check that fails
    decides the verdict.
    """
    threshold = settings.ACTIVATION_THRESHOLD if threshold is None else threshold
    scoring = ScoringService(rbo_p)
    a, b = source.record, target.record

    dissimilarity = compare_labels(a, b)
    rows = scoring.label_rows(a, b)
    report = DiffReport(
        variant_a=a.variant_id,
        variant_b=b.variant_id,
        dissimilarity_pct=dissimilarity,
        mean_rbo=sum(r.rbo for r in rows) / len(rows),
        verdict=Verdict.NO_DIVERGENCE,
        rows=rows,
        timing=compare_timing(a, b),
    )
    if labels:
        report.per_class = per_class_breakdown(a, b, labels, label_names)

    try:
        report.param_diff = parameter_diff(source.graph, target.graph)
        report.param_layers = parameter_diff_by_layer(source.graph, target.graph)
    except ParamMapMismatch as e:
        logger.debug(f"Parameters of {b.variant_id} do not map onto {a.variant_id}: {e}")

    report.structural_differences = structural_differences(source.graph, target.graph)
    if report.structural_differences:
        report.verdict = Verdict.GRAPH_STRUCTURE
        return _finish(report)
    if report.param_diff is None:
        raise ParamMapMismatch(f"{b.variant_id} matches {a.variant_id} structurally but its parameters do not map")
    if report.param_diff.max > 0:
        report.verdict = Verdict.PARAMETER

    traced = source.traces is not None and target.traces is not None
    traces_a = source.traces if traced else _logit_traces(a)
    traces_b = target.traces if traced else _logit_traces(b)
    per_image = activation_diff_by_image(traces_a, traces_b)
    _attach_profiles(report, per_image, threshold)

    if report.verdict == Verdict.NO_DIVERGENCE:
        activations_differ = any(layer.mean > threshold for layers in per_image.values() for layer in layers)
        if activations_differ or dissimilarity > 0:
            report.verdict = Verdict.ACTIVATION_ONLY
    return _finish(report)


def _attach_profiles(report: DiffReport, per_image: Dict[str, List[LayerDiff]], threshold: float) -> None:
    if not per_image:
        return
    divergent = [row.image_id for row in report.rows if row.top1_a != row.top1_b and row.image_id in per_image]
    chosen = divergent or sorted(per_image)
    report.per_layer = mean_profile([per_image[i] for i in chosen])
    worst = min(chosen, key=lambda i: (-per_image[i][-1].mean, i))
    report.worst_image_id = worst
    report.worst_image_layers = per_image[worst]
    report.onset_layer = onset_layer(report.per_layer, threshold)


def _finish(report: DiffReport) -> DiffReport:
    if report.verdict != Verdict.NO_DIVERGENCE:
        logger.warning(
            f"{report.variant_a} vs {report.variant_b}: {report.verdict.value}, "
            f"{report.dissimilarity_pct:.2f}% labels differ"
        )
    else:
        logger.info(f"{report.variant_a} vs {report.variant_b}: no divergence")
    return report


def _hop_is_faulty(report: DiffReport) -> bool:
    # a pure re-expression of the graph is not a fault unless labels move
    return report.dissimilarity_pct > 0 or report.verdict == Verdict.PARAMETER


def triangulate(
    source: VariantPackage,
    intermediate: VariantPackage,
    target: VariantPackage,
    threshold: Optional[float] = None,
) -> Tuple[TriangulationResult, List[DiffReport]]:
    """Localize both hops of a two-step conversion and name the first faulty one"""
    reports = []
    hops = []
    for a, b in ((source, intermediate), (intermediate, target)):
        report = localize(a, b, threshold)
        reports.append(report)
        hops.append(HopVerdict(
            source=a.variant_id,
            target=b.variant_id,
            verdict=report.verdict,
            dissimilarity_pct=report.dissimilarity_pct,
        ))
    faulty = next((i for i, r in enumerate(reports) if _hop_is_faulty(r)), None)
    if faulty is not None:
        logger.warning(f"Divergence introduced by hop {faulty + 1}: {hops[faulty].source} -> {hops[faulty].target}")
    return TriangulationResult(hops=hops, faulty_hop=faulty), reports
