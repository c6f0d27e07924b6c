"""
Flat parameter-vector arithmetic.
A ParamVector is a 1-D float64 numpy array; every update exchanged in a run (w, g, y, r, G)
has the same length d. TensorLayout maps the flat vector onto per-tensor shapes.
"""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from services.errors import DimensionError

ParamVector = np.ndarray


def as_param_vector(values, check_finite: bool = True) -> ParamVector:
    """Copy values into a contiguous 1-D float64 vector."""
    vec = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if check_finite and not np.all(np.isfinite(vec)):
        raise DimensionError("parameter vector contains non-finite values")
    return vec


def zeros(d: int) -> ParamVector:
    return np.zeros(d, dtype=np.float64)


def check_same_length(x: ParamVector, y: ParamVector) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0] if x.ndim else 0} vs {y.shape[0] if y.ndim else 0}")


def check_dimension(x: ParamVector, d: int, what: str = "vector") -> None:
    if x.ndim != 1 or x.shape[0] != d:
        raise DimensionError(f"{what} has shape {x.shape}, expected ({d},)")


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """a*x + y, new array."""
    check_same_length(x, y)
    return a * x + y


def norm2(x: ParamVector) -> float:
    return float(np.linalg.norm(x))


def hadamard(x: ParamVector, y: ParamVector) -> ParamVector:
    check_same_length(x, y)
    return x * y


@dataclass(frozen=True)
class TensorLayout:
    """Ordered tensor shapes packed back to back into one flat vector."""

    shapes: Tuple[Tuple[int, ...], ...]
    offsets: Tuple[int, ...] = field(init=False)
    size: int = field(init=False)

    def __post_init__(self):
        shapes = tuple(tuple(int(s) for s in shape) for shape in self.shapes)
        if not shapes:
            raise DimensionError("layout needs at least one tensor")
        offsets = []
        pos = 0
        for shape in shapes:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if count <= 0:
                raise DimensionError(f"tensor shape {shape} has no elements")
            offsets.append(pos)
            pos += count
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "size", pos)

    @property
    def num_tensors(self) -> int:
        return len(self.shapes)

    def counts(self) -> List[int]:
        ends = list(self.offsets[1:]) + [self.size]
        return [end - start for start, end in zip(self.offsets, ends)]

    def split(self, vec: ParamVector) -> List[np.ndarray]:
        """Views of vec reshaped to each tensor's shape."""
        check_dimension(vec, self.size, "flat vector")
        return [
            vec[start:start + count].reshape(shape)
            for start, count, shape in zip(self.offsets, self.counts(), self.shapes)
        ]

    def join(self, tensors: Sequence[np.ndarray]) -> ParamVector:
        if len(tensors) != self.num_tensors:
            raise DimensionError(f"expected {self.num_tensors} tensors, got {len(tensors)}")
        for t, shape in zip(tensors, self.shapes):
            if tuple(np.shape(t)) != shape:
                raise DimensionError(f"tensor shape {np.shape(t)} does not match layout {shape}")
        return np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for t in tensors])


def flat_layout(d: int) -> TensorLayout:
    return TensorLayout(shapes=((d,),))
