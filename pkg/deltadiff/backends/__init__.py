"""Interpreter Backends"""
from typing import Dict, Type, Union

from ..errors import ConfigError
from ..ir.graph import ModelGraph
from ..models import Backend
from .base import BaseBackend
from .optimized import OptimizedLayoutBackend
from .reference import ReferenceBackend

BACKENDS: Dict[Backend, Type[BaseBackend]] = {
    Backend.REFERENCE: ReferenceBackend,
    Backend.OPTIMIZED_LAYOUT: OptimizedLayoutBackend,
}


def get_backend(graph: ModelGraph, tag: Union[Backend, str] = Backend.REFERENCE) -> BaseBackend:
    """Instantiate the interpreter for ``tag`` over ``graph``"""
    try:
        return BACKENDS[Backend(tag)](graph)
    except ValueError:
        raise ConfigError(f"Unknown backend: {tag}")


__all__ = [
    "BaseBackend",
    "ReferenceBackend",
    "OptimizedLayoutBackend",
    "BACKENDS",
    "get_backend",
]
