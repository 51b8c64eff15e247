"""DTNS Binary Tensor Format

Layout (all little-endian):
    magic    4 bytes  b"DTNS"
    version  u32
    rank     u8
    dims     u32[rank]
    payload  f32[prod(dims)], row-major

A record file (weights sidecar, debug traces) is a sequence of
``name_len u16, name utf-8, DTNS tensor`` records.
"""
from pathlib import Path
from typing import Dict, Iterable, Tuple, Union
import logging
import struct

import numpy as np

from .core import Tensor
from ..errors import IoError, ParseError

logger = logging.getLogger(__name__)

MAGIC = b"DTNS"
VERSION = 1
_HEADER = struct.Struct("<4sIB")
_NAME_LEN = struct.Struct("<H")
_MAX_NAME_BYTES = 0xFFFF
_F32_LE = np.dtype("<f4")

PathLike = Union[str, Path]


def encode_tensor(tensor: Tensor) -> bytes:
    if tensor.rank > 255:
        raise ValueError(f"Rank {tensor.rank} does not fit the DTNS header")
    header = _HEADER.pack(MAGIC, VERSION, tensor.rank)
    dims = struct.pack(f"<{tensor.rank}I", *tensor.shape)
    return header + dims + tensor.array.astype(_F32_LE, copy=False).tobytes(order="C")


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """Decode one tensor at ``offset``; returns the tensor and the next offset"""
    try:
        magic, version, rank = _HEADER.unpack_from(buffer, offset)
    except struct.error as e:
        raise ParseError(f"Truncated DTNS header at byte {offset}") from e
    if magic != MAGIC:
        raise ParseError(f"Bad DTNS magic {magic!r} at byte {offset}")
    if version != VERSION:
        raise ParseError(f"Unsupported DTNS version {version}")
    if rank < 1:
        raise ParseError("DTNS tensor of rank 0")
    offset += _HEADER.size
    try:
        dims = struct.unpack_from(f"<{rank}I", buffer, offset)
    except struct.error as e:
        raise ParseError("Truncated DTNS dims") from e
    offset += 4 * rank
    count = int(np.prod(dims))
    end = offset + 4 * count
    if end > len(buffer) or any(d < 1 for d in dims):
        raise ParseError(f"DTNS payload for shape {list(dims)} is truncated or empty")
    data = np.frombuffer(buffer, dtype=_F32_LE, count=count, offset=offset)
    return Tensor(data.astype(np.float32), shape=dims), end


def write_tensor(path: PathLike, tensor: Tensor) -> None:
    try:
        Path(path).write_bytes(encode_tensor(tensor))
    except OSError as e:
        raise IoError(f"Cannot write tensor {path}: {e}") from e


def read_tensor(path: PathLike) -> Tensor:
    try:
        buffer = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read tensor {path}: {e}") from e
    tensor, end = decode_tensor(buffer)
    if end != len(buffer):
        raise ParseError(f"Trailing bytes after tensor in {path}")
    return tensor


def encode_records(records: Iterable[Tuple[str, Tensor]]) -> bytes:
    chunks = []
    for name, tensor in records:
        raw = name.encode("utf-8")
        if len(raw) > _MAX_NAME_BYTES:
            raise ParseError(f"Record name of {len(raw)} bytes exceeds the {_MAX_NAME_BYTES}-byte limit: {name[:32]}...")
        chunks.append(_NAME_LEN.pack(len(raw)))
        chunks.append(raw)
        chunks.append(encode_tensor(tensor))
    return b"".join(chunks)


def decode_records(buffer: bytes) -> Dict[str, Tensor]:
    records: Dict[str, Tensor] = {}
    offset = 0
    while offset < len(buffer):
        try:
            (length,) = _NAME_LEN.unpack_from(buffer, offset)
        except struct.error as e:
            raise ParseError(f"Truncated record name length at byte {offset}") from e
        offset += _NAME_LEN.size
        raw = buffer[offset:offset + length]
        if len(raw) != length:
            raise ParseError("Truncated record name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"Record name is not utf-8 at byte {offset}") from e
        offset += length
        if name in records:
            raise ParseError(f"Duplicate record name: {name}")
        records[name], offset = decode_tensor(buffer, offset)
    return records


def write_records(path: PathLike, records: Iterable[Tuple[str, Tensor]]) -> None:
    try:
        Path(path).write_bytes(encode_records(records))
    except OSError as e:
        raise IoError(f"Cannot write records {path}: {e}") from e


def read_records(path: PathLike) -> Dict[str, Tensor]:
    try:
        buffer = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read records {path}: {e}") from e
    return decode_records(buffer)
