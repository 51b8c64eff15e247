"""Report Writers

Plot-ready JSON and CSV outputs of the analysis stage. Every writer produces
stable filenames and stable row orders.
"""
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union
import csv
import json
import logging

from ..errors import IoError
from ..models import DiffReport, FailedVariant, PassTiming, TimingBlock, TimingComparison

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FAILED = "FAILED"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e


def _write_json(path: Path, payload) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e


def _num(value: float) -> str:
    return repr(float(value))


def report_dir(out_dir: PathLike, report: DiffReport) -> Path:
    return Path(out_dir) / "reports" / f"{report.variant_a}__{report.variant_b}"


def write_report(out_dir: PathLike, report: DiffReport) -> Path:
    """report.json plus labels_diff.csv, layer_diff.csv and param_diff.csv

    Timing statistics go to a separate timing.json so report.json is
    identical across reruns.
    """
    directory = report_dir(out_dir, report)
    directory.mkdir(parents=True, exist_ok=True)
    _write_json(directory / "report.json", report.model_dump(mode="json", exclude={"timing"}))
    if report.timing is not None:
        _write_json(directory / "timing.json", report.timing.model_dump(mode="json"))
    _write_csv(
        directory / "labels_diff.csv",
        ["image_id", "top1_a", "top1_b", "rbo"],
        ([r.image_id, r.top1_a, r.top1_b, _num(r.rbo)] for r in report.rows),
    )
    _write_csv(
        directory / "layer_diff.csv",
        ["layer_index", "node_id", "mean", "max", "std"],
        ([l.layer_index, l.node_id, _num(l.mean), _num(l.max), _num(l.std)] for l in report.per_layer),
    )
    _write_csv(
        directory / "param_diff.csv",
        ["layer_index", "node_id", "mean", "max"],
        ([p.layer_index, p.node_id, _num(p.mean), _num(p.max)] for p in report.param_layers),
    )
    logger.info(f"Wrote report {directory}")
    return directory


def write_matrix(
    path: PathLike,
    variant_ids: Sequence[str],
    dissimilarity: Mapping[str, Mapping[str, float]],
    failed: Iterable[FailedVariant] = (),
) -> Path:
    """Source x target top-1 dissimilarity; cells involving a failed variant read FAILED"""
    path = Path(path)
    failed_ids = {f.variant_id for f in failed}
    rows = []
    for source in variant_ids:
        row: List[str] = [source]
        for target in variant_ids:
            if source in failed_ids or target in failed_ids:
                row.append(FAILED)
            else:
                row.append(f"{dissimilarity[source][target]:.4f}")
        rows.append(row)
    _write_csv(path, ["source", *variant_ids], rows)
    logger.info(f"Wrote {len(variant_ids)}x{len(variant_ids)} dissimilarity matrix to {path}")
    return path


def write_timing_summary(
    path: PathLike,
    blocks: Sequence[TimingBlock],
    comparisons: Mapping[str, Optional[TimingComparison]],
    baseline: Optional[str] = None,
) -> Path:
    """Warm and cold means per variant plus its ANOVA against the baseline"""
    path = Path(path)
    payload = {
        "baseline": baseline,
        "variants": [
            {
                "variant_id": block.variant_id,
                "repeats": block.repeats,
                "warmup": block.warmup,
                "mean_ns": block.mean_ns,
                "cold_mean_ns": block.cold_mean_ns,
                "vs_baseline": (
                    comparisons[block.variant_id].model_dump(mode="json")
                    if comparisons.get(block.variant_id) is not None else None
                ),
            }
            for block in blocks
        ],
    }
    _write_json(path, payload)
    return path


def write_pass_sweep(out_dir: PathLike, model: str, results: Sequence[PassTiming]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "pass_sweep.json"
    csv_path = out_dir / "pass_sweep.csv"
    _write_json(json_path, {"model": model, "passes": [r.model_dump(mode="json") for r in results]})

    def row(r: PassTiming) -> List[str]:
        c = r.comparison
        return [
            r.pass_id.value,
            str(r.changed).lower(),
            _num(r.dissimilarity_pct),
            _num(c.pct_diff) if c is not None and c.pct_diff is not None else "",
            _num(c.f_statistic) if c is not None else "",
            _num(c.p_value) if c is not None else "",
            str(c.significant).lower() if c is not None else "",
        ]

    _write_csv(
        csv_path,
        ["pass_id", "changed", "dissimilarity_pct", "pct_diff", "f_statistic", "p_value", "significant"],
        (row(r) for r in results),
    )
    logger.info(f"Wrote pass sweep for {model} to {out_dir}")
    return {"json": json_path, "csv": csv_path}
