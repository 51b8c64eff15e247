"""Execution Service

Preprocessing, regular execution (labels + timing) and debug execution
(per-layer traces) of a variant over a corpus.
"""
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import json
import logging
import os
import time

import numpy as np

from ..backends import get_backend
from ..config import settings
from ..errors import (
    CorpusError, InvariantViolation, IoError, MissingInputs, ParseError, ShapeMismatch, TraceMismatch, ZeroStd,
)
from ..ir.graph import ModelGraph
from ..models import (
    Backend, ExecutionRecord, ImageResult, ImageTiming, PreprocessSpec, RankedLabel, TimingBlock, TraceEntry,
)
from ..tensor import Tensor, read_records, write_records
from .corpus import Corpus

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RECORDS_FILE = "records.jsonl"
TIMINGS_FILE = "timings.json"
TRACES_DIR = "traces"
_TIMING_FIELDS = {"durations_ns", "cold_ns"}


def worker_count() -> int:
    """Label-phase worker cap from DELTADIFF_THREADS (0 = cpu count)"""
    return settings.DELTADIFF_THREADS or os.cpu_count() or 1


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _resize_nearest(x: np.ndarray, size: Sequence[int]) -> np.ndarray:
    h, w = x.shape[2:]
    out_h, out_w = int(size[0]), int(size[1])
    if (out_h, out_w) == (h, w):
        return x
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return x[:, :, rows][:, :, :, cols]


def preprocess(raw: Tensor, spec: PreprocessSpec) -> Tensor:
    """Nearest-neighbor resize, then (x * scale - mean) / std per channel"""
    if raw.rank != 4:
        raise ShapeMismatch(f"preprocess expects rank-4 NCHW input, got {list(raw.shape)}")
    channels = raw.shape[1]
    if len(spec.mean) != channels or len(spec.std) != channels:
        raise ShapeMismatch(
            f"preprocess has {len(spec.mean)} means and {len(spec.std)} stds for {channels} channels"
        )
    std = np.asarray(spec.std, dtype=np.float32)
    if np.any(std == 0):
        raise ZeroStd(f"Zero std in preprocess spec: {spec.std}")
    mean = np.asarray(spec.mean, dtype=np.float32)

    x = raw.array
    if spec.size is not None:
        x = _resize_nearest(x, spec.size)
    out = (x * np.float32(spec.scale) - mean[None, :, None, None]) / std[None, :, None, None]
    return Tensor(out)


def prepare_inputs(graph: ModelGraph, corpus: Corpus) -> List[Tensor]:
    """Preprocess every corpus image for ``graph``; wrong shapes are corpus errors"""
    expected = tuple(graph.inputs[0].shape)
    inputs = []
    for image in corpus.images:
        try:
            x = preprocess(image.raw, graph.metadata.preprocess)
        except ShapeMismatch as e:
            raise CorpusError(f"Image {image.image_id}: {e}") from e
        if tuple(x.shape) != expected:
            raise CorpusError(
                f"Image {image.image_id} preprocesses to {list(x.shape)}, {graph.metadata.name} expects {list(expected)}"
            )
        inputs.append(x)
    return inputs


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def top_k(scores: Union[Tensor, np.ndarray, Sequence[float]], k: int) -> List[RankedLabel]:
    """Highest scores first; ties broken by ascending label index"""
    values = scores.flat() if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float32).reshape(-1)
    order = sorted(range(values.size), key=lambda i: (-float(values[i]), i))
    return [RankedLabel(label=i, score=float(values[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def backend_execute(graph: ModelGraph, input: Tensor, backend: Union[Backend, str] = Backend.REFERENCE) -> Tensor:
    return get_backend(graph, backend).execute(input)


def run_inference(
    graph: ModelGraph,
    corpus: Corpus,
    k: int = 5,
    repeats: int = 10,
    warmup: int = 1,
    backend: Union[Backend, str] = Backend.REFERENCE,
    variant_id: Optional[str] = None,
    on_image: Optional[Callable[[ImageResult], None]] = None,
) -> ExecutionRecord:
    """Serial timing of each image, then a threaded determinism check

    Timing runs are strictly serial: ``warmup`` untimed runs, then ``repeats``
    timed runs around the whole-graph execution only. The very first execution
    of each image is recorded as ``cold_ns`` and its output is the one
    reported. A second pass fans out over worker threads and must reproduce
    every output bit for bit.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    variant_id = variant_id or graph.metadata.name
    engine = get_backend(graph, backend)
    inputs = prepare_inputs(graph, corpus)

    record = ExecutionRecord(variant_id=variant_id, top_k=k, repeats=repeats, warmup=warmup)
    results: List[Tuple[ImageResult, Tensor]] = []
    for image, x in zip(corpus.images, inputs):
        start = time.perf_counter_ns()
        expected = engine.execute(x)
        cold_ns = max(time.perf_counter_ns() - start, 1)
        durations: List[int] = []
        for i in range(warmup + repeats):
            start = time.perf_counter_ns()
            out = engine.execute(x)
            elapsed = max(time.perf_counter_ns() - start, 1)
            if i >= warmup:
                durations.append(elapsed)
            if not out.bitwise_equal(expected):
                raise InvariantViolation(f"{variant_id} is not deterministic on image {image.image_id}")
        result = ImageResult(
            variant_id=variant_id,
            image_id=image.image_id,
            topk=top_k(expected, k),
            logits=[float(v) for v in expected.flat()],
            durations_ns=durations,
            cold_ns=cold_ns,
        )
        results.append((result, expected))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        outputs = list(pool.map(engine.execute, inputs))
    for (result, expected), out in zip(results, outputs):
        if not out.bitwise_equal(expected):
            raise InvariantViolation(f"{variant_id} differs across threads on image {result.image_id}")
        record.images.append(result)
        if on_image is not None:
            on_image(result)
    logger.info(f"Ran {variant_id} on {len(corpus)} images ({repeats} repeats, {warmup} warmup)")
    return record


def run_debug(
    graph: ModelGraph,
    corpus: Corpus,
    k: int = 5,
    backend: Union[Backend, str] = Backend.REFERENCE,
    variant_id: Optional[str] = None,
    budget_mb: Optional[int] = None,
) -> ExecutionRecord:
    """One traced run per image capturing every layer's activation"""
    variant_id = variant_id or graph.metadata.name
    engine = get_backend(graph, backend)
    inputs = prepare_inputs(graph, corpus)
    budget = (budget_mb if budget_mb is not None else settings.TRACE_BUDGET_MB) * 1024 * 1024

    record = ExecutionRecord(variant_id=variant_id, top_k=k, repeats=1, warmup=0, traces={})
    for image, x in zip(corpus.images, inputs):
        output, entries = engine.trace(x, budget_bytes=budget)
        budget -= sum(e.activation.nbytes for e in entries)
        final = next(e for e in entries if e.node_id == graph.outputs[0])
        if not final.activation.bitwise_equal(output):
            raise InvariantViolation(f"Final trace entry of {variant_id} differs from its output")
        record.traces[image.image_id] = entries
        record.images.append(ImageResult(
            variant_id=variant_id,
            image_id=image.image_id,
            topk=top_k(output, k),
            logits=[float(v) for v in output.flat()],
            durations_ns=[sum(e.duration_ns for e in entries)],
        ))
    logger.info(f"Traced {variant_id} on {len(corpus)} images ({len(graph.nodes)} layers)")
    return record


# ---------------------------------------------------------------------------
# records on disk
# ---------------------------------------------------------------------------

class RecordWriter:
    """Appends one JSON line per image and flushes it immediately

    Durations are left out so records of identical runs are byte-identical;
    they go to timings.json instead.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, result: ImageResult) -> None:
        self._fh.write(result.model_dump_json(exclude=_TIMING_FIELDS) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records_jsonl(path: PathLike, variant_id: Optional[str] = None) -> ExecutionRecord:
    """Load a records.jsonl file; a truncated last line is ignored"""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(f"Cannot read records {path}: {e}") from e
    images = []
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            images.append(ImageResult.model_validate_json(line))
        except ValueError as e:
            if number == len(lines):
                logger.warning(f"Ignoring truncated last record in {path}")
                break
            raise ParseError(f"Bad record on line {number} of {path}: {e}") from e
    variant_id = variant_id or (images[0].variant_id if images else path.parent.name)
    top = len(images[0].topk) if images else 1
    repeats = len(images[0].durations_ns) if images and images[0].durations_ns else 1
    return ExecutionRecord(variant_id=variant_id, top_k=top, repeats=repeats, images=images)


def timing_block(record: ExecutionRecord) -> TimingBlock:
    pooled = record.pooled_durations()
    colds = [i.cold_ns for i in record.images if i.cold_ns is not None]
    return TimingBlock(
        variant_id=record.variant_id,
        repeats=record.repeats,
        warmup=record.warmup,
        mean_ns=float(np.mean(pooled)) if pooled else 0.0,
        cold_mean_ns=float(np.mean(colds)) if colds else None,
        per_image={
            i.image_id: ImageTiming(cold_ns=i.cold_ns, durations_ns=i.durations_ns) for i in record.images
        },
    )


def write_timings(path: PathLike, record: ExecutionRecord) -> None:
    path = Path(path)
    try:
        path.write_text(timing_block(record).model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write timings {path}: {e}") from e


def read_timings(path: PathLike) -> TimingBlock:
    path = Path(path)
    try:
        return TimingBlock.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise IoError(f"Cannot read timings {path}: {e}") from e
    except ValueError as e:
        raise ParseError(f"Bad timings file {path}: {e}") from e


def write_traces(directory: PathLike, traces: Dict[str, List[TraceEntry]]) -> None:
    """One record file per image; entry names are ``<layer>:<op>:<node id>``"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    durations = {}
    for image_id, entries in sorted(traces.items()):
        write_records(
            directory / f"{image_id}.dtrace",
            [(f"{e.layer_index}:{e.op}:{e.node_id}", e.activation) for e in entries],
        )
        durations[image_id] = [e.duration_ns for e in entries]
    (directory / "durations.json").write_text(json.dumps(durations, sort_keys=True) + "\n", encoding="utf-8")


def read_traces(directory: PathLike) -> Dict[str, List[TraceEntry]]:
    directory = Path(directory)
    durations_path = directory / "durations.json"
    durations = json.loads(durations_path.read_text(encoding="utf-8")) if durations_path.exists() else {}
    traces: Dict[str, List[TraceEntry]] = {}
    for path in sorted(directory.glob("*.dtrace")):
        image_id = path.stem
        per_layer = durations.get(image_id, [])
        entries = []
        for position, (name, tensor) in enumerate(read_records(path).items()):
            try:
                index, op, node_id = name.split(":", 2)
                layer_index = int(index)
            except ValueError as e:
                raise TraceMismatch(f"Bad trace entry name '{name}' in {path}") from e
            duration = per_layer[position] if position < len(per_layer) else 1
            entries.append(TraceEntry(layer_index, node_id, op, tensor, duration))
        traces[image_id] = entries
    return traces


def record_dir(out_dir: PathLike, variant_id: str) -> Path:
    return Path(out_dir) / "records" / variant_id


def save_record(directory: PathLike, record: ExecutionRecord) -> Path:
    """records.jsonl, timings.json and, for debug runs, the traces directory"""
    directory = Path(directory)
    with RecordWriter(directory / RECORDS_FILE) as writer:
        for image in record.images:
            writer.write(image)
    write_timings(directory / TIMINGS_FILE, record)
    if record.traces is not None:
        write_traces(directory / TRACES_DIR, record.traces)
    return directory


def load_record(directory: PathLike) -> ExecutionRecord:
    """Inverse of ``save_record``; timings and traces are merged in when present"""
    directory = Path(directory)
    records_path = directory / RECORDS_FILE
    if not records_path.exists():
        raise MissingInputs(f"No records at {records_path}; run the variants first")
    record = read_records_jsonl(records_path)
    timings_path = directory / TIMINGS_FILE
    if timings_path.exists():
        block = read_timings(timings_path)
        record.repeats = block.repeats
        record.warmup = block.warmup
        for image in record.images:
            timing = block.per_image.get(image.image_id)
            if timing is not None:
                image.durations_ns = timing.durations_ns
                image.cold_ns = timing.cold_ns
    traces_path = directory / TRACES_DIR
    if traces_path.is_dir():
        record.traces = read_traces(traces_path)
    return record
