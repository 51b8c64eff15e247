"""Timing Statistics Service

One-way ANOVA over per-repeat durations, percentage differences between
variants and the one-pass-at-a-time timing sweep.
"""
from typing import List, Optional, Sequence, Union
import logging

import numpy as np
from scipy.special import betainc

from ..config import settings
from ..errors import DegenerateGroups
from ..ir.graph import ModelGraph, topo_sort
from ..models import Backend, ExecutionRecord, OptLevel, PassId, PassTiming, TimingComparison
from ..optimizer import PASS_ORDER, apply_level, apply_pass
from .corpus import Corpus
from .executor import run_inference
from .scoring import compare_labels

logger = logging.getLogger(__name__)


def anova(groups: Sequence[Sequence[float]], alpha: Optional[float] = None) -> TimingComparison:
    """One-way ANOVA across two or more groups of samples

    The p-value is the upper tail of the F(d1, d2) distribution, computed
    with the regularized incomplete beta function.
    """
    alpha = settings.SIGNIFICANCE_LEVEL if alpha is None else alpha
    if len(groups) < 2:
        raise DegenerateGroups(f"ANOVA needs at least 2 groups, got {len(groups)}")
    samples = [np.asarray(g, dtype=np.float64) for g in groups]
    if any(s.size < 2 for s in samples):
        raise DegenerateGroups(f"Every group needs at least 2 samples, got sizes {[s.size for s in samples]}")

    everything = np.concatenate(samples)
    grand = everything.mean()
    means = [s.mean() for s in samples]
    ss_between = float(sum(s.size * (m - grand) ** 2 for s, m in zip(samples, means)))
    ss_within = float(sum(((s - m) ** 2).sum() for s, m in zip(samples, means)))
    if ss_within == 0.0:
        raise DegenerateGroups("Zero within-group variance; the F statistic is undefined")

    d1 = len(samples) - 1
    d2 = everything.size - len(samples)
    f = (ss_between / d1) / (ss_within / d2)
    p = float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)))
    p = min(1.0, max(0.0, p))
    return TimingComparison(
        group_means_ns=[float(m) for m in means],
        f_statistic=float(f),
        p_value=p,
        significant=p < alpha,
    )


def timing_pct_diff(mean_a: float, mean_b: float) -> float:
    """(b - a) / a as a percentage; positive means b is slower"""
    if mean_a <= 0 or mean_b <= 0:
        raise ValueError(f"Timing means must be positive, got {mean_a} and {mean_b}")
    return (mean_b - mean_a) / mean_a * 100.0


def compare_timing(
    a: Union[ExecutionRecord, Sequence[int]],
    b: Union[ExecutionRecord, Sequence[int]],
) -> Optional[TimingComparison]:
    """ANOVA plus percentage difference of two variants' pooled durations

    Returns None when the samples cannot support a test.
    """
    samples_a = a.pooled_durations() if isinstance(a, ExecutionRecord) else list(a)
    samples_b = b.pooled_durations() if isinstance(b, ExecutionRecord) else list(b)
    try:
        comparison = anova([samples_a, samples_b])
    except DegenerateGroups as e:
        logger.debug(f"Skipping timing comparison: {e}")
        return None
    mean_a, mean_b = comparison.group_means_ns
    comparison.pct_diff = timing_pct_diff(mean_a, mean_b)
    return comparison


def _structure(graph: ModelGraph):
    return [(n.signature(), tuple(n.inputs)) for n in topo_sort(graph)], graph.metadata.fast_math


def pass_sweep(
    graph: ModelGraph,
    corpus: Corpus,
    passes: Optional[Sequence[PassId]] = None,
    repeats: int = 10,
    warmup: int = 1,
    k: int = 5,
    backend: Union[Backend, str] = Backend.REFERENCE,
) -> List[PassTiming]:
    """Time each pass applied alone on top of the Basic graph against Basic itself"""
    basic = apply_level(graph, OptLevel.BASIC)
    base_id = f"{graph.metadata.name}.basic"
    baseline = run_inference(basic, corpus, k, repeats, warmup, backend, variant_id=base_id)

    results = []
    for pass_id in passes or [p for p in PASS_ORDER if p != PassId.SIMPLIFY_INFERENCE]:
        pass_id = PassId(pass_id)
        variant = apply_pass(basic, pass_id)
        changed = _structure(variant) != _structure(basic)
        record = run_inference(
            variant, corpus, k, repeats, warmup, backend, variant_id=f"{base_id}+{pass_id.value}",
        )
        comparison = compare_timing(baseline, record)
        results.append(PassTiming(
            pass_id=pass_id,
            changed=changed,
            dissimilarity_pct=compare_labels(baseline, record),
            comparison=comparison,
        ))
        pct = f"{comparison.pct_diff:+.1f}%" if comparison is not None else "n/a"
        logger.info(f"Pass {pass_id.value} alone: {'changed' if changed else 'no-op'}, time {pct}")
    return results
