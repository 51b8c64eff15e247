"""Corpus Service

On-disk image corpora (``<image id>.dtns`` tensors plus ``labels.csv``) and the
bundled 64-image desk corpus.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import csv
import logging

import numpy as np

from ..errors import CorpusError, DeltaDiffError
from ..ir import DESK_LABELS, ModelGraph, desk_model
from ..ir.zoo import DESK_SEED, desk_images
from ..tensor import Tensor, read_tensor, write_tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LABELS_FILE = "labels.csv"
DESK_BOUNDARY_IMAGES = 8
BOUNDARY_MARGIN = 1e-4
BOUNDARY_FLOOR = 3e-5
_MAX_BISECTIONS = 60


@dataclass(frozen=True)
class CorpusImage:
    image_id: str
    raw: Tensor
    label: Optional[int] = None


@dataclass
class Corpus:
    """Ordered images with optional ground-truth class indices"""
    images: List[CorpusImage] = field(default_factory=list)
    label_names: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.images)

    def ids(self) -> List[str]:
        return [image.image_id for image in self.images]

    def labels(self) -> Dict[str, int]:
        return {image.image_id: image.label for image in self.images if image.label is not None}

    def label_name(self, index: int) -> str:
        return self.label_names[index] if 0 <= index < len(self.label_names) else str(index)


def load_corpus(directory: PathLike, label_names: Sequence[str] = ()) -> Corpus:
    """Read every ``*.dtns`` image in id order together with ``labels.csv``"""
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"Corpus directory not found: {directory}")
    labels: Dict[str, int] = {}
    labels_path = directory / LABELS_FILE
    if labels_path.exists():
        try:
            with open(labels_path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    labels[row["image_id"]] = int(row["label_index"])
        except (KeyError, ValueError, OSError) as e:
            raise CorpusError(f"Bad labels file {labels_path}: {e}") from e
    else:
        logger.warning(f"No {LABELS_FILE} in {directory}; per-class breakdowns will be empty")

    images = []
    for path in sorted(directory.glob("*.dtns")):
        try:
            raw = read_tensor(path)
        except DeltaDiffError as e:
            raise CorpusError(f"Unreadable corpus image {path}: {e}") from e
        images.append(CorpusImage(path.stem, raw, labels.get(path.stem)))
    if not images:
        raise CorpusError(f"Corpus {directory} contains no .dtns images")
    unknown = sorted(set(labels) - {image.image_id for image in images})
    if unknown:
        raise CorpusError(f"{LABELS_FILE} names images that are not in the corpus: {unknown[:5]}")
    logger.info(f"Loaded corpus of {len(images)} images from {directory}")
    return Corpus(images, tuple(label_names))


def write_corpus(directory: PathLike, corpus: Corpus) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image in corpus.images:
        write_tensor(directory / f"{image.image_id}.dtns", image.raw)
    with open(directory / LABELS_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "label_index"])
        for image in corpus.images:
            if image.label is not None:
                writer.writerow([image.image_id, image.label])
    logger.info(f"Wrote corpus of {len(corpus)} images to {directory}")
    return directory


# ---------------------------------------------------------------------------
# desk corpus
# ---------------------------------------------------------------------------

def _scores(graph: ModelGraph, raw: np.ndarray) -> np.ndarray:
    from .executor import backend_execute, preprocess
    return backend_execute(graph, preprocess(Tensor(raw), graph.metadata.preprocess)).flat()


def _top1(scores: np.ndarray) -> int:
    # argmax returns the lowest index among ties, matching the top-K rule
    return int(np.argmax(scores))


def relative_margin(scores: np.ndarray) -> float:
    """Gap between the two best scores as a fraction of the whole score range"""
    ordered = np.sort(scores.astype(np.float64))[::-1]
    return float((ordered[0] - ordered[1]) / max(ordered[0] - ordered[-1], np.finfo(np.float32).tiny))


def boundary_image(graph: ModelGraph, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, int, float]:
    """Bisect the segment a -> b for a point just on a's side of the decision boundary

    The top-1 of ``a`` and ``b`` must differ. Every candidate is evaluated
    exactly as it will be stored (float32), so the returned label and margin
    are those the executor will see.
    """
    label_a = _top1(_scores(graph, a))
    if _top1(_scores(graph, b)) == label_a:
        raise ValueError("Endpoints share a top-1 label")
    lo, hi = 0.0, 1.0
    best = a
    margin = relative_margin(_scores(graph, a))
    for _ in range(_MAX_BISECTIONS):
        if margin <= BOUNDARY_MARGIN:
            break
        mid = (lo + hi) / 2
        candidate = ((1.0 - mid) * a.astype(np.float64) + mid * b.astype(np.float64)).astype(np.float32)
        scores = _scores(graph, candidate)
        # too close counts as crossing so the result stays clear of rounding-level flips
        if _top1(scores) == label_a and relative_margin(scores) >= BOUNDARY_FLOOR:
            lo, best, margin = mid, candidate, relative_margin(scores)
        else:
            hi = mid
    return best, label_a, margin


def desk_corpus(seed: int = DESK_SEED, model: Optional[ModelGraph] = None) -> Corpus:
    """56 smooth synthetic images plus 8 images next to tinynet-A's decision boundary

    Ground-truth labels are tinynet-A's top-1 on the Reference backend.
    """
    model = model if model is not None else desk_model("tinynet-A")
    smooth = list(desk_images(seed))
    labels = [_top1(_scores(model, image)) for image in smooth]

    boundary: List[Tuple[np.ndarray, int]] = []
    used = set()
    for i in range(len(smooth)):
        for j in range(i + 1, len(smooth)):
            if len(boundary) == DESK_BOUNDARY_IMAGES:
                break
            if labels[i] == labels[j] or i in used or j in used:
                continue
            image, label, margin = boundary_image(model, smooth[i], smooth[j])
            logger.debug(f"Boundary image from pair ({i}, {j}): label {label}, relative margin {margin:.2e}")
            boundary.append((image, label))
            used.update((i, j))
    if len(boundary) < DESK_BOUNDARY_IMAGES:
        raise CorpusError(
            f"Only {len(boundary)} of {DESK_BOUNDARY_IMAGES} boundary images: "
            f"{model.metadata.name} gives {len(set(labels))} distinct labels on the smooth images"
        )

    images = [CorpusImage(f"img{i:03d}", Tensor(raw), label) for i, (raw, label) in enumerate(
        list(zip(smooth, labels)) + boundary
    )]
    return Corpus(images, tuple(model.metadata.labels or DESK_LABELS))


def ensure_desk_corpus(directory: PathLike, seed: int = DESK_SEED) -> Corpus:
    """Materialize the desk corpus under ``directory`` unless it is already there"""
    directory = Path(directory)
    if (directory / LABELS_FILE).exists():
        return load_corpus(directory, DESK_LABELS)
    corpus = desk_corpus(seed)
    write_corpus(directory, corpus)
    return corpus
