"""Reference Operator Kernels

Every reduction accumulates sequentially in float32 in a fixed order, so
results are reproducible bit for bit:

- conv2d: over C, then R, then S; bias added last
- dense: over F; bias added last
- batch_matmul: over K
- softmax / pooling: over the reduced axis in index order

The ``fast_*`` variants are used when a graph carries the fast-math flag.
They may reassociate reductions (BLAS-backed) and approximate ``exp``.
"""
from typing import Optional, Sequence, Tuple
import logging
import math

import numpy as np

from .core import Tensor
from ..errors import InvalidEpsilon, InvalidStride, ShapeMismatch

logger = logging.getLogger(__name__)

SAME = "SAME"
VALID = "VALID"

_LN2 = np.float32(math.log(2.0))
_INV_LN2 = np.float32(1.0 / math.log(2.0))
# Taylor coefficients of exp on [-ln2/2, ln2/2], degree 6
_EXP_COEFFS = tuple(np.float32(1.0 / math.factorial(i)) for i in range(6, -1, -1))


# ---------------------------------------------------------------------------
# shape rules
# ---------------------------------------------------------------------------

def check_stride(stride: Sequence[int]) -> Tuple[int, int]:
    if len(stride) != 2:
        raise InvalidStride(f"Stride must have two components, got {list(stride)}")
    sh, sw = int(stride[0]), int(stride[1])
    if sh < 1 or sw < 1:
        raise InvalidStride(f"Stride components must be >= 1, got {list(stride)}")
    return sh, sw


def same_pads(size: int, window: int, stride: int) -> Tuple[int, int, int]:
    """Output extent and (before, after) padding for SAME

    The odd pixel goes to the bottom/right.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + window - size, 0)
    before = total // 2
    return out, before, total - before


def window_output(size: int, window: int, stride: int, padding: str) -> Tuple[int, int, int]:
    """Output extent and padding of one spatial axis"""
    if padding == SAME:
        return same_pads(size, window, stride)
    if padding == VALID:
        if size < window:
            raise ShapeMismatch(f"Window {window} larger than input extent {size} with VALID padding")
        return (size - window) // stride + 1, 0, 0
    raise ValueError(f"Unknown padding: {padding}")


def conv2d_output_shape(
    input_shape: Sequence[int],
    weight_shape: Sequence[int],
    stride: Sequence[int],
    padding: str,
) -> Tuple[int, int, int, int]:
    if len(input_shape) != 4 or len(weight_shape) != 4:
        raise ShapeMismatch(f"conv2d expects rank-4 input and weights, got {list(input_shape)} and {list(weight_shape)}")
    n, c, h, w = input_shape
    k, wc, r, s = weight_shape
    if c != wc:
        raise ShapeMismatch(f"conv2d channel mismatch: input has {c}, weights have {wc}")
    sh, sw = check_stride(stride)
    out_h = window_output(h, r, sh, padding)[0]
    out_w = window_output(w, s, sw, padding)[0]
    return n, k, out_h, out_w


def _pad_spatial(x: np.ndarray, r: int, s: int, sh: int, sw: int, padding: str, fill: float = 0.0):
    """Pad H and W for a window op; returns padded array and output extents"""
    out_h, top, bottom = window_output(x.shape[2], r, sh, padding)
    out_w, left, right = window_output(x.shape[3], s, sw, padding)
    if top or bottom or left or right:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (top, bottom), (left, right)),
            mode="constant",
            constant_values=np.float32(fill),
        )
    return x, out_h, out_w


def _window(xp: np.ndarray, r: int, s: int, out_h: int, out_w: int, sh: int, sw: int) -> np.ndarray:
    return xp[..., r:r + (out_h - 1) * sh + 1:sh, s:s + (out_w - 1) * sw + 1:sw]


def _bias_vector(bias: Optional[Tensor], extent: int, op: str) -> Optional[np.ndarray]:
    if bias is None:
        return None
    if bias.shape != (extent,):
        raise ShapeMismatch(f"{op} bias shape {list(bias.shape)} does not match {extent} outputs")
    return bias.array


# ---------------------------------------------------------------------------
# linear kernels
# ---------------------------------------------------------------------------

def conv2d(
    input: Tensor,
    weights: Tensor,
    bias: Optional[Tensor] = None,
    stride: Sequence[int] = (1, 1),
    padding: str = VALID,
) -> Tensor:
    """2-D convolution, NCHW input and KCRS weights"""
    n, k, out_h, out_w = conv2d_output_shape(input.shape, weights.shape, stride, padding)
    sh, sw = check_stride(stride)
    _, c, r_ext, s_ext = weights.shape
    b = _bias_vector(bias, k, "conv2d")

    xp, _, _ = _pad_spatial(input.array, r_ext, s_ext, sh, sw, padding)
    w = weights.array
    acc = np.zeros((n, k, out_h, out_w), dtype=np.float32)
    for ci in range(c):
        for r in range(r_ext):
            for s in range(s_ext):
                patch = _window(xp[:, ci], r, s, out_h, out_w, sh, sw)
                acc += patch[:, None, :, :] * w[:, ci, r, s][None, :, None, None]
    if b is not None:
        acc += b[None, :, None, None]
    return Tensor.wrap(acc)


def dense(input: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = W x + b for a batch of row vectors"""
    if input.rank != 2 or weights.rank != 2:
        raise ShapeMismatch(f"dense expects rank-2 input and weights, got {list(input.shape)} and {list(weights.shape)}")
    n, f = input.shape
    o, wf = weights.shape
    if f != wf:
        raise ShapeMismatch(f"dense feature mismatch: input has {f}, weights have {wf}")
    b = _bias_vector(bias, o, "dense")

    x = input.array
    w = weights.array
    acc = np.zeros((n, o), dtype=np.float32)
    for fi in range(f):
        acc += x[:, fi][:, None] * w[:, fi][None, :]
    if b is not None:
        acc += b[None, :]
    return Tensor.wrap(acc)


def batch_matmul_output_shape(a_shape: Sequence[int], b_shape: Sequence[int]) -> Tuple[int, int, int]:
    if len(a_shape) != 3 or len(b_shape) != 3:
        raise ShapeMismatch(f"batch_matmul expects rank-3 operands, got {list(a_shape)} and {list(b_shape)}")
    if a_shape[0] != b_shape[0]:
        raise ShapeMismatch(f"batch_matmul batch mismatch: {a_shape[0]} vs {b_shape[0]}")
    if a_shape[2] != b_shape[1]:
        raise ShapeMismatch(f"batch_matmul inner mismatch: {a_shape[2]} vs {b_shape[1]}")
    return a_shape[0], a_shape[1], b_shape[2]


def batch_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Per-batch matrix product [B,M,K] x [B,K,N]"""
    batch, m, n = batch_matmul_output_shape(a.shape, b.shape)
    x = a.array
    y = b.array
    acc = np.zeros((batch, m, n), dtype=np.float32)
    for ki in range(a.shape[2]):
        acc += x[:, :, ki][:, :, None] * y[:, ki, :][:, None, :]
    return Tensor.wrap(acc)


# ---------------------------------------------------------------------------
# elementwise and normalization
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    a = x.array
    keep = (a > 0) | np.isnan(a)
    return Tensor.wrap(np.where(keep, a, np.float32(0.0)).astype(np.float32))


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"add cannot broadcast {list(a.shape)} with {list(b.shape)}") from e
    out = np.add(a.array, b.array, dtype=np.float32)
    return Tensor.wrap(np.ascontiguousarray(out))


def scale_channels(x: Tensor, scale: Tensor, axis: int = 1) -> Tensor:
    """Multiply each slice along ``axis`` by its entry of ``scale``"""
    axis = _normalize_axis(axis, x.rank)
    if scale.shape != (x.shape[axis],):
        raise ShapeMismatch(f"scale of shape {list(scale.shape)} does not match axis {axis} of {list(x.shape)}")
    view = [1] * x.rank
    view[axis] = x.shape[axis]
    return Tensor.wrap(x.array * scale.array.reshape(view))


def check_epsilon(epsilon: float, var: np.ndarray) -> None:
    if epsilon < 0:
        raise InvalidEpsilon(f"batchnorm epsilon must be >= 0, got {epsilon}")
    if epsilon == 0 and not (var > 0).all():
        raise InvalidEpsilon("batchnorm epsilon of 0 requires strictly positive variance")


def batchnorm_coefficients(
    gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, epsilon: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel (scale, mean, beta) with scale = gamma / sqrt(var + eps)"""
    check_epsilon(epsilon, var.array)
    scale = gamma.array / np.sqrt(var.array + np.float32(epsilon))
    return scale.astype(np.float32), mean.array, beta.array


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: Tensor,
    var: Tensor,
    epsilon: float,
    axis: int = 1,
) -> Tensor:
    """Inference batch normalization: (x - mean) * gamma / sqrt(var + eps) + beta"""
    axis = _normalize_axis(axis, x.rank)
    channels = x.shape[axis]
    for name, t in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if t.shape != (channels,):
            raise ShapeMismatch(f"batchnorm {name} shape {list(t.shape)} does not match {channels} channels")
    scale, mu, shift = batchnorm_coefficients(gamma, beta, mean, var, epsilon)
    view = [1] * x.rank
    view[axis] = channels
    out = (x.array - mu.reshape(view)) * scale.reshape(view) + shift.reshape(view)
    return Tensor.wrap(out.astype(np.float32))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """exp(x - max) / sum, summed in index order"""
    axis = _normalize_axis(axis, x.rank)
    a = np.moveaxis(x.array, axis, -1)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted).astype(np.float32)
    total = np.zeros(e.shape[:-1], dtype=np.float32)
    for i in range(e.shape[-1]):
        total += e[..., i]
    out = e / total[..., None]
    return Tensor.wrap(np.ascontiguousarray(np.moveaxis(out, -1, axis)))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_args(x: Tensor, kernel: Sequence[int], stride: Sequence[int]) -> Tuple[int, int, int, int]:
    if x.rank != 4:
        raise ShapeMismatch(f"pooling expects rank-4 NCHW input, got {list(x.shape)}")
    if len(kernel) != 2 or kernel[0] < 1 or kernel[1] < 1:
        raise ShapeMismatch(f"pooling kernel must be two positive extents, got {list(kernel)}")
    sh, sw = check_stride(stride)
    return int(kernel[0]), int(kernel[1]), sh, sw


def pool_output_shape(
    input_shape: Sequence[int], kernel: Sequence[int], stride: Sequence[int], padding: str
) -> Tuple[int, int, int, int]:
    if len(input_shape) != 4:
        raise ShapeMismatch(f"pooling expects rank-4 NCHW input, got {list(input_shape)}")
    sh, sw = check_stride(stride)
    n, c, h, w = input_shape
    return n, c, window_output(h, kernel[0], sh, padding)[0], window_output(w, kernel[1], sw, padding)[0]


def maxpool(x: Tensor, kernel: Sequence[int] = (2, 2), stride: Sequence[int] = (2, 2), padding: str = VALID) -> Tensor:
    kh, kw, sh, sw = _pool_args(x, kernel, stride)
    xp, out_h, out_w = _pad_spatial(x.array, kh, kw, sh, sw, padding, fill=-np.inf)
    out = None
    for r in range(kh):
        for s in range(kw):
            window = _window(xp, r, s, out_h, out_w, sh, sw)
            out = window.copy() if out is None else np.maximum(out, window)
    return Tensor.wrap(np.ascontiguousarray(out, dtype=np.float32))


def avgpool(x: Tensor, kernel: Sequence[int] = (2, 2), stride: Sequence[int] = (2, 2), padding: str = VALID) -> Tensor:
    """Window mean; SAME padding counts only in-bounds elements"""
    kh, kw, sh, sw = _pool_args(x, kernel, stride)
    xp, out_h, out_w = _pad_spatial(x.array, kh, kw, sh, sw, padding)
    ones = np.ones((1, 1) + x.shape[2:], dtype=np.float32)
    mp, _, _ = _pad_spatial(ones, kh, kw, sh, sw, padding)
    acc = np.zeros(x.shape[:2] + (out_h, out_w), dtype=np.float32)
    count = np.zeros((1, 1, out_h, out_w), dtype=np.float32)
    for r in range(kh):
        for s in range(kw):
            acc += _window(xp, r, s, out_h, out_w, sh, sw)
            count += _window(mp, r, s, out_h, out_w, sh, sw)
    return Tensor.wrap(acc / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C], summed in row-major spatial order"""
    if x.rank != 4:
        raise ShapeMismatch(f"global_avg_pool expects rank-4 NCHW input, got {list(x.shape)}")
    n, c, h, w = x.shape
    flat = x.array.reshape(n, c, h * w)
    acc = np.zeros((n, c), dtype=np.float32)
    for i in range(h * w):
        acc += flat[:, :, i]
    return Tensor.wrap(acc / np.float32(h * w))


# ---------------------------------------------------------------------------
# data movement
# ---------------------------------------------------------------------------

def resolve_reshape(input_shape: Sequence[int], target: Sequence[int]) -> Tuple[int, ...]:
    size = int(np.prod(input_shape))
    target = [int(d) for d in target]
    if target.count(-1) > 1:
        raise ShapeMismatch(f"reshape target {target} has more than one -1")
    if -1 in target:
        known = int(np.prod([d for d in target if d != -1])) or 1
        if size % known:
            raise ShapeMismatch(f"cannot reshape {list(input_shape)} into {target}")
        target[target.index(-1)] = size // known
    if int(np.prod(target)) != size or any(d < 1 for d in target):
        raise ShapeMismatch(f"cannot reshape {list(input_shape)} into {target}")
    return tuple(target)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Tensor.wrap(np.ascontiguousarray(x.array.reshape(resolve_reshape(x.shape, shape))))


def concat_output_shape(shapes: Sequence[Sequence[int]], axis: int) -> Tuple[int, ...]:
    if not shapes:
        raise ShapeMismatch("concat needs at least one input")
    rank = len(shapes[0])
    axis = _normalize_axis(axis, rank)
    out = list(shapes[0])
    for shape in shapes[1:]:
        if len(shape) != rank or any(shape[i] != out[i] for i in range(rank) if i != axis):
            raise ShapeMismatch(f"concat operands {[list(s) for s in shapes]} differ off axis {axis}")
        out[axis] += shape[axis]
    return tuple(out)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    concat_output_shape([t.shape for t in tensors], axis)
    axis = _normalize_axis(axis, tensors[0].rank)
    return Tensor.wrap(np.ascontiguousarray(np.concatenate([t.array for t in tensors], axis=axis)))


def slice_axis(x: Tensor, axis: int, begin: int, end: int) -> Tensor:
    axis = _normalize_axis(axis, x.rank)
    if not 0 <= begin < end <= x.shape[axis]:
        raise ShapeMismatch(f"slice [{begin}, {end}) out of range for axis {axis} of {list(x.shape)}")
    index = [slice(None)] * x.rank
    index[axis] = slice(begin, end)
    return Tensor.wrap(np.ascontiguousarray(x.array[tuple(index)]))


def _normalize_axis(axis: int, rank: int) -> int:
    if not -rank <= axis < rank:
        raise ShapeMismatch(f"axis {axis} out of range for rank {rank}")
    return axis % rank


# ---------------------------------------------------------------------------
# fast-math variants
# ---------------------------------------------------------------------------

def exp_poly(x: np.ndarray) -> np.ndarray:
    """Degree-6 polynomial exp with power-of-two range reduction"""
    x = np.clip(x.astype(np.float32), np.float32(-87.0), np.float32(88.0))
    k = np.rint(x * _INV_LN2)
    r = (x - k * _LN2).astype(np.float32)
    p = np.full_like(r, _EXP_COEFFS[0])
    for coeff in _EXP_COEFFS[1:]:
        p = p * r + coeff
    return np.ldexp(p, k.astype(np.int32)).astype(np.float32)


def fast_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis(axis, x.rank)
    a = x.array
    e = exp_poly(a - a.max(axis=axis, keepdims=True))
    return Tensor.wrap(np.ascontiguousarray(e / e.sum(axis=axis, keepdims=True, dtype=np.float32)))


def fast_conv2d(
    input: Tensor,
    weights: Tensor,
    bias: Optional[Tensor] = None,
    stride: Sequence[int] = (1, 1),
    padding: str = VALID,
) -> Tensor:
    n, k, out_h, out_w = conv2d_output_shape(input.shape, weights.shape, stride, padding)
    sh, sw = check_stride(stride)
    _, _, r_ext, s_ext = weights.shape
    b = _bias_vector(bias, k, "conv2d")
    xp, _, _ = _pad_spatial(input.array, r_ext, s_ext, sh, sw, padding)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (r_ext, s_ext), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw][:, :, :out_h, :out_w]
    out = np.einsum("nchwrs,kcrs->nkhw", windows, weights.array, optimize=True).astype(np.float32)
    if b is not None:
        out += b[None, :, None, None]
    return Tensor.wrap(np.ascontiguousarray(out))


def fast_dense(input: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if input.rank != 2 or weights.rank != 2 or input.shape[1] != weights.shape[1]:
        raise ShapeMismatch(f"dense shapes {list(input.shape)} and {list(weights.shape)} do not align")
    b = _bias_vector(bias, weights.shape[0], "dense")
    out = (input.array @ weights.array.T).astype(np.float32)
    if b is not None:
        out += b[None, :]
    return Tensor.wrap(np.ascontiguousarray(out))


def fast_batch_matmul(a: Tensor, b: Tensor) -> Tensor:
    batch_matmul_output_shape(a.shape, b.shape)
    return Tensor.wrap(np.ascontiguousarray(np.matmul(a.array, b.array).astype(np.float32)))


def fast_global_avg_pool(x: Tensor) -> Tensor:
    if x.rank != 4:
        raise ShapeMismatch(f"global_avg_pool expects rank-4 NCHW input, got {list(x.shape)}")
    return Tensor.wrap(np.ascontiguousarray(x.array.mean(axis=(2, 3), dtype=np.float32)))
