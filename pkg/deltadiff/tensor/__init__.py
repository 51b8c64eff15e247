"""Tensors, Kernels and the DTNS Codec"""
from .core import Tensor
from .codec import (
    decode_records, decode_tensor, encode_records, encode_tensor,
    read_records, read_tensor, write_records, write_tensor,
)
from . import kernels, blocked

__all__ = [
    "Tensor",
    "kernels",
    "blocked",
    "encode_tensor",
    "decode_tensor",
    "read_tensor",
    "write_tensor",
    "encode_records",
    "decode_records",
    "read_records",
    "write_records",
]
