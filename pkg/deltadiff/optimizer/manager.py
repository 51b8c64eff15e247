"""Pass Manager

Optimization levels are fixed, ordered pass bundles; individual passes can be
enabled on top of a level or disabled out of it (disable wins).
"""
from typing import Iterable, List, Optional
import logging

from ..ir.graph import ModelGraph
from ..models import OptLevel, PassId
from .passes import PASSES

logger = logging.getLogger(__name__)

_BASIC = [PassId.SIMPLIFY_INFERENCE]
_DEFAULT = _BASIC + [PassId.FUSE_OPS, PassId.FOLD_CONSTANTS, PassId.FOLD_SCALE_AXIS]
_EXTENDED = _DEFAULT + [
    PassId.ELIMINATE_COMMON_SUBEXPR,
    PassId.CANONICALIZE_OPS,
    PassId.COMBINE_PARALLEL_OPS,
    PassId.FAST_MATH,
]

LEVEL_PASSES = {
    OptLevel.BASIC: _BASIC,
    OptLevel.DEFAULT: _DEFAULT,
    OptLevel.EXTENDED: _EXTENDED,
}

# canonical position of every pass, used to slot enabled extras into a level
PASS_ORDER = list(_EXTENDED)


def pass_list(
    level: OptLevel,
    enable: Optional[Iterable[PassId]] = None,
    disable: Optional[Iterable[PassId]] = None,
) -> List[PassId]:
    """Ordered passes for ``level`` with toggles applied"""
    selected = set(LEVEL_PASSES[OptLevel(level)])
    selected.update(PassId(p) for p in (enable or ()))
    selected.difference_update(PassId(p) for p in (disable or ()))
    return [p for p in PASS_ORDER if p in selected]


def apply_pass(graph: ModelGraph, pass_id: PassId) -> ModelGraph:
    return PASSES[PassId(pass_id)](graph)


def apply_passes(graph: ModelGraph, passes: Iterable[PassId]) -> ModelGraph:
    for pass_id in passes:
        graph = apply_pass(graph, pass_id)
    return graph


def apply_level(
    graph: ModelGraph,
    level: OptLevel,
    enable: Optional[Iterable[PassId]] = None,
    disable: Optional[Iterable[PassId]] = None,
) -> ModelGraph:
    """Fold ``apply_pass`` over ``pass_list(level)``"""
    passes = pass_list(level, enable, disable)
    logger.debug(f"Optimizing {graph.metadata.name} at {OptLevel(level).value}: {[p.value for p in passes]}")
    return apply_passes(graph, passes)
