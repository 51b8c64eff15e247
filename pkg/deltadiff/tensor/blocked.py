"""Channels-last Kernels

Same per-element accumulation order as the reference kernels (conv: C, R, S;
dense: F; batch_matmul: K), computed over channels-last accumulators with
pre-packed weights so the inner updates run on contiguous memory. Outputs are
bit-identical to the reference kernels.
"""
from typing import Optional, Sequence
import numpy as np

from .core import Tensor
from .kernels import (
    _bias_vector, _pad_spatial, _window,
    batch_matmul_output_shape, check_stride, conv2d_output_shape,
)
from ..errors import ShapeMismatch


def pack_conv_weights(weights: Tensor) -> np.ndarray:
    """KCRS -> CRSK, contiguous"""
    return np.ascontiguousarray(weights.array.transpose(1, 2, 3, 0))


def pack_dense_weights(weights: Tensor) -> np.ndarray:
    """OF -> FO, contiguous"""
    return np.ascontiguousarray(weights.array.T)


def conv2d_nhwc(
    input: Tensor,
    weights: Tensor,
    bias: Optional[Tensor] = None,
    stride: Sequence[int] = (1, 1),
    padding: str = "VALID",
    packed: Optional[np.ndarray] = None,
) -> Tensor:
    n, k, out_h, out_w = conv2d_output_shape(input.shape, weights.shape, stride, padding)
    sh, sw = check_stride(stride)
    _, c, r_ext, s_ext = weights.shape
    b = _bias_vector(bias, k, "conv2d")
    wt = pack_conv_weights(weights) if packed is None else packed

    xp, _, _ = _pad_spatial(input.array, r_ext, s_ext, sh, sw, padding)
    acc = np.zeros((n, out_h, out_w, k), dtype=np.float32)
    for ci in range(c):
        plane = xp[:, ci]
        for r in range(r_ext):
            for s in range(s_ext):
                patch = np.ascontiguousarray(_window(plane, r, s, out_h, out_w, sh, sw))
                acc += patch[..., None] * wt[ci, r, s]
    if b is not None:
        acc += b
    return Tensor.wrap(np.ascontiguousarray(acc.transpose(0, 3, 1, 2)))


def dense_packed(
    input: Tensor,
    weights: Tensor,
    bias: Optional[Tensor] = None,
    packed: Optional[np.ndarray] = None,
) -> Tensor:
    if input.rank != 2 or weights.rank != 2 or input.shape[1] != weights.shape[1]:
        raise ShapeMismatch(f"dense shapes {list(input.shape)} and {list(weights.shape)} do not align")
    b = _bias_vector(bias, weights.shape[0], "dense")
    wt = pack_dense_weights(weights) if packed is None else packed

    xt = np.ascontiguousarray(input.array.T)
    acc = np.zeros((input.shape[0], weights.shape[0]), dtype=np.float32)
    for fi in range(input.shape[1]):
        acc += xt[fi][:, None] * wt[fi]
    if b is not None:
        acc += b
    return Tensor.wrap(acc)


def batch_matmul_packed(a: Tensor, b: Tensor) -> Tensor:
    batch, m, n = batch_matmul_output_shape(a.shape, b.shape)
    at = np.ascontiguousarray(a.array.transpose(0, 2, 1))
    y = b.array
    acc = np.zeros((batch, m, n), dtype=np.float32)
    for ki in range(a.shape[2]):
        acc += at[:, ki, :, None] * y[:, ki, None, :]
    return Tensor.wrap(acc)
