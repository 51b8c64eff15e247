"""Label Scoring Service

Top-1 dissimilarity, rank-biased overlap and per-class breakdowns between two
execution records over the same corpus.
"""
from collections import Counter
from typing import List, Mapping, Optional, Sequence, Tuple
import logging

from ..config import settings
from ..errors import CorpusMismatch, InvalidP
from ..models import ClassBreakdown, ExecutionRecord, ImageResult, LabelDiffRow

logger = logging.getLogger(__name__)


def _paired(a: ExecutionRecord, b: ExecutionRecord) -> List[Tuple[ImageResult, ImageResult]]:
    """Images of both records in a's order; the corpora must match exactly"""
    ids_a = [image.image_id for image in a.images]
    ids_b = [image.image_id for image in b.images]
    if sorted(ids_a) != sorted(ids_b):
        missing = sorted(set(ids_a) ^ set(ids_b))
        raise CorpusMismatch(
            f"{a.variant_id} and {b.variant_id} were run on different corpora ({len(missing)} unmatched images)"
        )
    if not ids_a:
        raise CorpusMismatch(f"{a.variant_id} and {b.variant_id} have no images")
    by_id = b.by_image()
    return [(image, by_id[image.image_id]) for image in a.images]


def compare_labels(a: ExecutionRecord, b: ExecutionRecord) -> float:
    """Percentage of images whose top-1 labels differ"""
    pairs = _paired(a, b)
    differing = sum(1 for x, y in pairs if x.top1 != y.top1)
    return 100.0 * differing / len(pairs)


def rbo(a: Sequence[int], b: Sequence[int], p: float = 0.9) -> float:
    """Truncated rank-biased overlap at depth K with weights normalized to sum to 1

    Args:
        a: First ranking, best first
        b: Second ranking of the same depth
        p: Persistence, 0 < p < 1

    Returns:
        Similarity in [0, 1]; identical rankings score exactly 1.0
    """
    if not 0.0 < p < 1.0:
        raise InvalidP(f"RBO persistence must be in (0, 1), got {p}")
    if len(a) != len(b):
        raise ValueError(f"Rankings must have equal depth, got {len(a)} and {len(b)}")
    depth = len(a)
    if list(a) == list(b):
        return 1.0

    norm = 1.0 - p ** depth
    seen_a, seen_b = set(), set()
    overlap = 0
    total = 0.0
    for d in range(1, depth + 1):
        x, y = a[d - 1], b[d - 1]
        if x == y:
            overlap += 1
        else:
            overlap += (x in seen_b) + (y in seen_a)
        seen_a.add(x)
        seen_b.add(y)
        weight = (1.0 - p) * p ** (d - 1) / norm
        total += weight * overlap / d
    return min(1.0, max(0.0, total))


def per_class_breakdown(
    a: ExecutionRecord,
    b: ExecutionRecord,
    labels: Mapping[str, int],
    label_names: Sequence[str] = (),
) -> List[ClassBreakdown]:
    """Fraction of each ground-truth class whose top-1 labels disagree

    Sorted by fraction descending, then by class name.
    """
    pairs = _paired(a, b)
    unlabeled = [x.image_id for x, _ in pairs if x.image_id not in labels]
    if unlabeled:
        raise CorpusMismatch(f"No ground-truth label for {len(unlabeled)} images, e.g. {unlabeled[0]}")

    totals: Counter = Counter()
    affected: Counter = Counter()
    for x, y in pairs:
        cls = labels[x.image_id]
        totals[cls] += 1
        if x.top1 != y.top1:
            affected[cls] += 1

    def name(index: int) -> str:
        return label_names[index] if 0 <= index < len(label_names) else str(index)

    rows = [
        ClassBreakdown(
            label=name(cls),
            affected=affected[cls],
            total=totals[cls],
            pct=100.0 * affected[cls] / totals[cls],
        )
        for cls in totals
    ]
    return sorted(rows, key=lambda r: (-r.pct, r.label))


class ScoringService:
    """Label-level comparison of two records with a fixed RBO persistence"""

    def __init__(self, p: Optional[float] = None):
        self.p = settings.RBO_P if p is None else p
        if not 0.0 < self.p < 1.0:
            raise InvalidP(f"RBO persistence must be in (0, 1), got {self.p}")

    def label_rows(self, a: ExecutionRecord, b: ExecutionRecord) -> List[LabelDiffRow]:
        """One row per image: both top-1 labels and the RBO of both rankings

        Args:
            a: Record of the first variant
            b: Record of the second variant, same corpus

        Returns:
            Rows in a's image order
        """
        rows = []
        for x, y in _paired(a, b):
            depth = min(len(x.ranking), len(y.ranking))
            rows.append(LabelDiffRow(
                image_id=x.image_id,
                top1_a=x.top1,
                top1_b=y.top1,
                rbo=rbo(x.ranking[:depth], y.ranking[:depth], self.p),
            ))
        return rows

    def mean_rbo(self, a: ExecutionRecord, b: ExecutionRecord) -> float:
        rows = self.label_rows(a, b)
        return sum(r.rbo for r in rows) / len(rows)

