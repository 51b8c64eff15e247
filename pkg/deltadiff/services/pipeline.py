"""Experiment Pipeline

Drives the stages behind each command: generate variants, run them over the
corpus, analyze the records, sweep single passes, the fault-repair demo and
bundled asset export. All outputs land under the experiment's output
directory with stable filenames.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import logging

from pydantic import ValidationError

from ..config import DESK_CORPUS, ExperimentConfig, settings
from ..errors import ConfigError, MissingInputs, ParseError
from ..ir import DESK_LABELS, DESK_MODELS, ModelGraph, desk_model, load_model, save_model
from ..models import (
    Backend, DiffReport, ExecutionRecord, FailedVariant, OptLevel, PassTiming, VariantSpec, Verdict,
)
from ..optimizer import apply_level
from .corpus import Corpus, ensure_desk_corpus, load_corpus, write_corpus, desk_corpus
from .executor import (
    RECORDS_FILE, TIMINGS_FILE, TRACES_DIR, RecordWriter, load_record, record_dir, run_debug,
    run_inference, save_record, timing_block, write_timings, write_traces,
)
from .localization import VariantPackage, localize
from .reports import write_matrix, write_pass_sweep, write_report, write_timing_summary
from .scoring import compare_labels
from .timing import compare_timing, pass_sweep
from .variants import enumerate_variants, inject_noise, load_model_ref, repair_parameters

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VARIANTS_DIR = "variants"
MANIFEST_FILE = "variants.json"


# ---------------------------------------------------------------------------
# variant manifest
# ---------------------------------------------------------------------------

@dataclass
class VariantManifest:
    specs: List[VariantSpec] = field(default_factory=list)
    failed: List[FailedVariant] = field(default_factory=list)
    order: List[str] = field(default_factory=list)

    def ids(self) -> List[str]:
        """Every variant id, failed ones included, in generation order"""
        return self.order or [s.variant_id for s in self.specs] + [f.variant_id for f in self.failed]


def variant_path(out_dir: PathLike, variant_id: str) -> Path:
    return Path(out_dir) / VARIANTS_DIR / f"{variant_id}.json"


def read_manifest(out_dir: PathLike) -> VariantManifest:
    path = Path(out_dir) / MANIFEST_FILE
    if not path.exists():
        raise MissingInputs(f"No {MANIFEST_FILE} in {out_dir}; run generate first")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return VariantManifest(
            specs=[VariantSpec.model_validate(v["spec"]) for v in data["variants"]],
            failed=[FailedVariant.model_validate(f) for f in data["failed"]],
            order=list(data.get("order", [])),
        )
    except (ValueError, KeyError, ValidationError) as e:
        raise ParseError(f"Bad variant manifest {path}: {e}") from e


def _write_manifest(out_dir: Path, manifest: VariantManifest) -> Path:
    payload = {
        "variants": [
            {
                "variant_id": spec.variant_id,
                "path": f"{VARIANTS_DIR}/{spec.variant_id}.json",
                "spec": spec.model_dump(mode="json"),
            }
            for spec in manifest.specs
        ],
        "failed": [f.model_dump(mode="json") for f in manifest.failed],
        "order": manifest.ids(),
    }
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def resolve_corpus(config: ExperimentConfig) -> Corpus:
    if config.corpus_is_desk:
        return ensure_desk_corpus(config.output_dir / "corpus")
    return load_corpus(config.resolve(config.corpus.path), DESK_LABELS)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def generate(config: ExperimentConfig) -> VariantManifest:
    """Materialize every variant and save it with the variants.json manifest"""
    config.check_paths()
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    variant_set = enumerate_variants(config)
    for spec, graph in variant_set.variants:
        save_model(graph, variant_path(out_dir, spec.variant_id))
    manifest = VariantManifest(
        [spec for spec, _ in variant_set.variants], variant_set.failed, variant_set.ids(),
    )
    path = _write_manifest(out_dir, manifest)
    logger.info(
        f"Generated {len(manifest.specs)} variants ({len(manifest.failed)} failed), manifest at {path}"
    )
    return manifest


def run(config: ExperimentConfig, debug: bool = False) -> Dict[str, ExecutionRecord]:
    """Execute every generated variant over the corpus, flushing records per image"""
    out_dir = config.output_dir
    manifest = read_manifest(out_dir)
    corpus = resolve_corpus(config)
    records = {}
    for spec in manifest.specs:
        graph = load_model(variant_path(out_dir, spec.variant_id))
        directory = record_dir(out_dir, spec.variant_id)
        with RecordWriter(directory / RECORDS_FILE) as writer:
            record = run_inference(
                graph, corpus, config.top_k, config.repeats, config.warmup,
                spec.backend, spec.variant_id, on_image=writer.write,
            )
        write_timings(directory / TIMINGS_FILE, record)
        if debug:
            traced = run_debug(graph, corpus, config.top_k, spec.backend, spec.variant_id)
            write_traces(directory / TRACES_DIR, traced.traces)
            record.traces = traced.traces
        records[spec.variant_id] = record
    logger.info(f"Ran {len(records)} variants on {len(corpus)} images")
    return records


@dataclass
class AnalysisResult:
    baseline: str
    reports: List[DiffReport]
    matrix_path: Path
    timing_path: Path


def _baseline(config: ExperimentConfig, manifest: VariantManifest) -> str:
    if config.baseline:
        known = {s.variant_id for s in manifest.specs}
        if config.baseline not in known:
            failed = {f.variant_id for f in manifest.failed}
            reason = "failed to generate" if config.baseline in failed else "is not a generated variant"
            raise ConfigError(f"Baseline {config.baseline} {reason}")
        return config.baseline
    if not manifest.specs:
        raise MissingInputs("No successfully generated variants to analyze")
    return manifest.specs[0].variant_id


def analyze(config: ExperimentConfig, pairs: Optional[Sequence[Tuple[str, str]]] = None) -> AnalysisResult:
    """Reports for the selected pairs (default: every variant against the baseline)"""
    out_dir = config.output_dir
    manifest = read_manifest(out_dir)
    baseline = _baseline(config, manifest)

    packages: Dict[str, VariantPackage] = {}
    for spec in manifest.specs:
        record = load_record(record_dir(out_dir, spec.variant_id))
        graph = load_model(variant_path(out_dir, spec.variant_id))
        packages[spec.variant_id] = VariantPackage(graph, record, record.traces)

    if pairs is None:
        pairs = [(baseline, v) for v in packages if v != baseline]
    for a, b in pairs:
        for v in (a, b):
            if v not in packages:
                raise MissingInputs(f"No records for variant {v}")

    labels: Dict[str, int] = {}
    label_names: Sequence[str] = DESK_LABELS
    corpus_dir = out_dir / "corpus" if config.corpus_is_desk else config.resolve(config.corpus.path)
    if corpus_dir.is_dir():
        labels = load_corpus(corpus_dir, DESK_LABELS).labels()

    reports = []
    for a, b in pairs:
        report = localize(
            packages[a], packages[b], config.analysis.threshold, config.analysis.rbo_p, labels, label_names,
        )
        write_report(out_dir, report)
        reports.append(report)

    ids = manifest.ids()
    dissimilarity = {
        x: {y: compare_labels(packages[x].record, packages[y].record) for y in packages}
        for x in packages
    }
    matrix_path = write_matrix(out_dir / "matrix.csv", ids, dissimilarity, manifest.failed)

    blocks = [timing_block(packages[v].record) for v in packages]
    comparisons = {
        v: (compare_timing(packages[baseline].record, packages[v].record) if v != baseline else None)
        for v in packages
    }
    timing_path = write_timing_summary(out_dir / "timing_summary.json", blocks, comparisons, baseline)
    logger.info(f"Analyzed {len(reports)} pairs against baseline {baseline}")
    return AnalysisResult(baseline, reports, matrix_path, timing_path)


def sweep(config: ExperimentConfig) -> Dict[str, List[PassTiming]]:
    """Single-pass timing sweep for every configured model"""
    config.check_paths()
    corpus = resolve_corpus(config)
    backend = config.backends[0]
    results = {}
    for ref in config.models:
        graph = load_model_ref(config.model_ref(ref))
        name = graph.metadata.name
        results[name] = pass_sweep(
            graph, corpus, repeats=config.repeats, warmup=config.warmup, k=config.top_k, backend=backend,
        )
        write_pass_sweep(config.output_dir / "sweep" / name, name, results[name])
    return results


def export_assets(out_dir: PathLike) -> Path:
    """Desk models and the desk corpus, written with their fixed seeds"""
    out_dir = Path(out_dir)
    for name in DESK_MODELS:
        save_model(desk_model(name), out_dir / "models" / f"{name}.json")
    write_corpus(out_dir / DESK_CORPUS, desk_corpus())
    logger.info(f"Exported {len(DESK_MODELS)} desk models and the desk corpus to {out_dir}")
    return out_dir


# ---------------------------------------------------------------------------
# demo
# ---------------------------------------------------------------------------

DEMO_SIGMA = 3.75e-4
DEMO_CLAMP = 0.011
DEMO_SEED_TRIES = 5
DEMO_REPEATS = 3


@dataclass
class DemoResult:
    noise_seed: int
    faulty: DiffReport
    repaired: DiffReport

    @property
    def converged(self) -> bool:
        return self.repaired.verdict == Verdict.NO_DIVERGENCE and self.repaired.dissimilarity_pct == 0


def demo(out_dir: PathLike, seed: int = 0) -> DemoResult:
    """Inject conversion noise into tinynet-A, localize it, repair it and re-check

    Tries up to five noise seeds starting at ``seed`` and keeps the first one
    that flips at least one label.
    """
    out_dir = Path(out_dir) / "demo"
    corpus = ensure_desk_corpus(out_dir / "corpus")
    labels = corpus.labels()
    source = apply_level(desk_model("tinynet-A"), OptLevel.BASIC)
    source_pkg = _package(source, corpus, "tinynet-A.source", out_dir)

    faulty_report = None
    faulty_graph = None
    noise_seed = seed
    for noise_seed in range(seed, seed + DEMO_SEED_TRIES):
        noisy = apply_level(
            inject_noise(desk_model("tinynet-A"), DEMO_SIGMA, DEMO_CLAMP, noise_seed), OptLevel.BASIC,
        )
        noisy_pkg = _package(noisy, corpus, "tinynet-A.converted", out_dir)
        faulty_report = localize(source_pkg, noisy_pkg, labels=labels, label_names=corpus.label_names)
        faulty_graph = noisy
        if faulty_report.dissimilarity_pct > 0:
            break
        logger.info(f"Noise seed {noise_seed} flipped no labels, trying the next seed")

    repaired = repair_parameters(faulty_graph, source)
    repaired_pkg = _package(repaired, corpus, "tinynet-A.repaired", out_dir)
    repaired_report = localize(source_pkg, repaired_pkg, labels=labels, label_names=corpus.label_names)

    for report in (faulty_report, repaired_report):
        write_report(out_dir, report)
    return DemoResult(noise_seed, faulty_report, repaired_report)


def _package(graph: ModelGraph, corpus: Corpus, variant_id: str, out_dir: Path) -> VariantPackage:
    record = run_inference(graph, corpus, settings.DEFAULT_TOP_K, DEMO_REPEATS, 1, Backend.REFERENCE, variant_id)
    record.traces = run_debug(graph, corpus, settings.DEFAULT_TOP_K, Backend.REFERENCE, variant_id).traces
    save_record(record_dir(out_dir, variant_id), record)
    return VariantPackage(graph, record, record.traces)
