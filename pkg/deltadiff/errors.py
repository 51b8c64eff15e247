"""Harness Exceptions

Every harness error carries the process exit code the CLI maps it to:
0 success, 2 config, 3 corpus/IO, 4 missing inputs, 5 internal.
"""
from typing import Optional


class DeltaDiffError(Exception):
    """Base class for all harness errors"""

    exit_code: int = 5

    def __init__(self, message: str = "", *, node_id: Optional[str] = None):
        self.node_id = node_id
        if node_id is not None and message:
            message = f"{message} (node '{node_id}')"
        super().__init__(message)


# Configuration (exit 2)
class ConfigError(DeltaDiffError):
    exit_code = 2


# Corpus and IO (exit 3)
class CorpusError(DeltaDiffError):
    exit_code = 3


class IoError(DeltaDiffError):
    exit_code = 3


class ParseError(IoError):
    """Manifest, sidecar or tensor file does not parse"""


class MissingWeight(IoError):
    """Manifest references a parameter the sidecar does not contain"""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Missing weight: {name}")


# Missing inputs (exit 4)
class MissingInputs(DeltaDiffError):
    exit_code = 4


# Internal (exit 5)
class InvariantViolation(DeltaDiffError):
    pass


class ShapeMismatch(DeltaDiffError, ValueError):
    pass


class InvalidStride(DeltaDiffError, ValueError):
    pass


class InvalidEpsilon(DeltaDiffError, ValueError):
    pass


class CyclicGraph(DeltaDiffError):
    pass


class UnsupportedOp(DeltaDiffError):
    """Operator kind unknown, or not expressible in a target dialect"""

    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(message or f"Unsupported op: {kind}")


class InvalidGraph(DeltaDiffError):
    pass


class ParamMapMismatch(DeltaDiffError):
    pass


class TraceMismatch(DeltaDiffError):
    pass


class CorpusMismatch(DeltaDiffError):
    pass


class InvalidP(DeltaDiffError, ValueError):
    pass


class DegenerateGroups(DeltaDiffError, ValueError):
    pass


class ZeroStd(DeltaDiffError, ValueError):
    pass


class OutOfMemoryBudget(DeltaDiffError):
    pass
