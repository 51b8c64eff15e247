"""Harness Services"""
from .corpus import Corpus, CorpusImage, desk_corpus, ensure_desk_corpus, load_corpus, write_corpus
from .executor import (
    backend_execute, load_record, preprocess, run_debug, run_inference, save_record, top_k, worker_count,
)
from .localization import (
    VariantPackage, activation_diff, localize, parameter_diff, parameter_diff_by_layer,
    structural_differences, triangulate,
)
from .scoring import ScoringService, compare_labels, per_class_breakdown, rbo
from .timing import anova, compare_timing, pass_sweep, timing_pct_diff
from .variants import (
    VariantSet, align_parameters, convert, enumerate_variants, inject_noise, materialize, repair_parameters,
)

__all__ = [
    "Corpus",
    "CorpusImage",
    "desk_corpus",
    "ensure_desk_corpus",
    "load_corpus",
    "write_corpus",
    "backend_execute",
    "load_record",
    "preprocess",
    "run_debug",
    "run_inference",
    "save_record",
    "top_k",
    "worker_count",
    "VariantPackage",
    "activation_diff",
    "localize",
    "parameter_diff",
    "parameter_diff_by_layer",
    "structural_differences",
    "triangulate",
    "ScoringService",
    "compare_labels",
    "per_class_breakdown",
    "rbo",
    "anova",
    "compare_timing",
    "pass_sweep",
    "timing_pct_diff",
    "VariantSet",
    "align_parameters",
    "convert",
    "enumerate_variants",
    "inject_noise",
    "materialize",
    "repair_parameters",
]
