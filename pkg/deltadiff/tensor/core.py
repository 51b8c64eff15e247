"""Dense float32 Tensor"""
from typing import Iterable, Optional, Sequence, Tuple, Union
import numpy as np

from ..errors import ShapeMismatch

ArrayLike = Union[np.ndarray, Sequence, float, int]


class Tensor:
    """Immutable dense f32 tensor in row-major order

    Wraps a read-only numpy array. 4-D activations are NCHW.
    """

    __slots__ = ("_data", "layout")

    def __init__(self, data: ArrayLike, shape: Optional[Iterable[int]] = None, layout: Optional[str] = None):
        array = np.array(data, dtype=np.float32, copy=True, order="C")
        if shape is not None:
            shape = tuple(int(d) for d in shape)
            if int(np.prod(shape)) != array.size:
                raise ShapeMismatch(
                    f"Buffer of {array.size} elements does not fill shape {shape}"
                )
            array = array.reshape(shape)
        if array.ndim == 0:
            array = array.reshape(1)
        if any(d < 1 for d in array.shape):
            raise ShapeMismatch(f"All extents must be >= 1, got {array.shape}")
        array.flags.writeable = False
        self._data = array
        self.layout = layout or ("NCHW" if array.ndim == 4 else None)

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt a freshly computed float32 array without copying"""
        if array.dtype != np.float32 or not array.flags.c_contiguous:
            return cls(array)
        tensor = cls.__new__(cls)
        if array.ndim == 0:
            array = array.reshape(1)
        array.flags.writeable = False
        tensor._data = array
        tensor.layout = "NCHW" if array.ndim == 4 else None
        return tensor

    @classmethod
    def zeros(cls, shape: Iterable[int]) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape), dtype=np.float32))

    @classmethod
    def full(cls, shape: Iterable[int], value: float) -> "Tensor":
        return cls.wrap(np.full(tuple(shape), value, dtype=np.float32))

    @property
    def array(self) -> np.ndarray:
        """Read-only numpy view"""
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def nbytes(self) -> int:
        return int(self._data.nbytes)

    def flat(self) -> np.ndarray:
        return self._data.reshape(-1)

    def tolist(self) -> list:
        return self._data.tolist()

    def bitwise_equal(self, other: "Tensor") -> bool:
        """Shape and bit pattern equality (distinguishes -0.0 and NaN payloads)"""
        if self.shape != other.shape:
            return False
        return bool(np.array_equal(self._data.view(np.uint32), other._data.view(np.uint32)))

    def has_nan(self) -> bool:
        return bool(np.isnan(self._data).any())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.bitwise_equal(other)

    def __hash__(self) -> int:
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"<Tensor shape={list(self.shape)}>"
