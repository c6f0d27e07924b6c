"""
Per-tensor symmetric quantization of client updates: fp16 cast, signed int8, packed signed int4.
fp32 is the identity passthrough used by the non-quantized strategies.
Integer modes round half away from zero; fp16 saturates at +/-65504 instead of overflowing to inf.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np

from services.errors import QuantizationError
from services.numvec import ParamVector, TensorLayout

logger = logging.getLogger(__name__)

FP16_MAX = float(np.finfo(np.float16).max)
SCALE_BYTES = 8
DIM_BYTES = 4


class QuantMode(str, Enum):
    FP32 = "fp32"
    FP16 = "fp16"
    INT8 = "int8"
    INT4 = "int4"


# symmetric integer range per mode
_LEVELS = {QuantMode.INT8: 127, QuantMode.INT4: 7}


@dataclass(frozen=True)
class QuantizedTensor:
    mode: QuantMode
    data: np.ndarray
    scale: float
    shape: Tuple[int, ...]
    saturated: int = 0

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class QuantizedUpdate:
    mode: QuantMode
    tensors: Tuple[QuantizedTensor, ...]

    @property
    def saturated(self) -> int:
        return sum(t.saturated for t in self.tensors)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _scale(W: np.ndarray, levels: int) -> float:
    peak = float(np.max(np.abs(W))) if W.size else 0.0
    alpha = peak / levels
    return alpha if alpha > 0 else 1.0


def pack_nibbles(nibbles: np.ndarray) -> np.ndarray:
    """Two nibbles per byte, first in the high half; an odd tail gets a zero low nibble."""
    nib = np.asarray(nibbles, dtype=np.uint8).reshape(-1)
    if nib.size and nib.max() > 15:
        raise QuantizationError("nibble value above 15")
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return ((nib[0::2] << 4) | nib[1::2]).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, count: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8).reshape(-1)
    if packed.size != math.ceil(count / 2):
        raise QuantizationError(f"packed length {packed.size} inconsistent with {count} elements")
    nib = np.empty(packed.size * 2, dtype=np.uint8)
    nib[0::2] = packed >> 4
    nib[1::2] = packed & 0x0F
    return nib[:count]


def _quant_tensor(W: np.ndarray, mode: QuantMode, index: int) -> QuantizedTensor:
    if not np.all(np.isfinite(W)):
        raise QuantizationError("non-finite value in update", tensor_index=index)
    shape = tuple(W.shape)
    flat = W.reshape(-1)
    if mode is QuantMode.FP32:
        return QuantizedTensor(mode, flat.astype(np.float64, copy=True), 1.0, shape)
    if mode is QuantMode.FP16:
        over = int(np.count_nonzero(np.abs(flat) > FP16_MAX))
        if over:
            logger.warning("fp16 cast saturated %d values in tensor %d", over, index)
        data = np.clip(flat, -FP16_MAX, FP16_MAX).astype(np.float16)
        return QuantizedTensor(mode, data, 1.0, shape, saturated=over)

    levels = _LEVELS[mode]
    alpha = _scale(flat, levels)
    q = np.clip(round_half_away(flat / alpha), -levels, levels).astype(np.int8)
    if mode is QuantMode.INT8:
        return QuantizedTensor(mode, q, alpha, shape)
    return QuantizedTensor(mode, pack_nibbles((q + 8).astype(np.uint8)), alpha, shape)


def quant(update: ParamVector, layout: TensorLayout, mode: QuantMode) -> QuantizedUpdate:
    mode = QuantMode(mode)
    tensors = tuple(_quant_tensor(W, mode, i) for i, W in enumerate(layout.split(update)))
    return QuantizedUpdate(mode=mode, tensors=tensors)


def _dequant_tensor(t: QuantizedTensor, index: int) -> np.ndarray:
    if not (math.isfinite(t.scale) and t.scale > 0):
        raise QuantizationError(f"invalid scale {t.scale}", tensor_index=index)
    if t.mode is QuantMode.INT4:
        try:
            nib = unpack_nibbles(t.data, t.count)
        except QuantizationError as exc:
            raise QuantizationError(str(exc), tensor_index=index) from exc
        values = (nib.astype(np.int64) - 8) * t.scale
    else:
        if t.data.size != t.count:
            raise QuantizationError(f"{t.data.size} values for shape {t.shape}", tensor_index=index)
        if t.mode is QuantMode.INT8:
            values = t.data.astype(np.int64) * t.scale
        else:
            values = t.data.astype(np.float64)
    return values.reshape(-1)


def dequant(q: QuantizedUpdate) -> ParamVector:
    if not q.tensors:
        raise QuantizationError("quantized update holds no tensors")
    return np.concatenate([_dequant_tensor(t, i) for i, t in enumerate(q.tensors)])


def quant_error_bound(update: ParamVector, layout: TensorLayout, mode: QuantMode) -> List[float]:
    """Per-tensor upper bound on max |dequant(quant(x)) - x|."""
    mode = QuantMode(mode)
    bounds = []
    for W in layout.split(update):
        peak = float(np.max(np.abs(W)))
        if mode is QuantMode.FP32:
            bounds.append(0.0)
        elif mode is QuantMode.FP16:
            # half-ulp relative error, floored at half the subnormal spacing
            bounds.append(max(peak * 2.0 ** -11, 2.0 ** -25, peak - FP16_MAX))
        else:
            bounds.append(_scale(W.reshape(-1), _LEVELS[mode]) / 2.0)
    return bounds


def payload_bytes(mode: QuantMode, count: int, rank: int) -> int:
    """Bytes one tensor of `count` elements and `rank` dims occupies in the given mode."""
    mode = QuantMode(mode)
    if mode is QuantMode.FP32:
        return 4 * count
    if mode is QuantMode.FP16:
        return 2 * count
    if mode is QuantMode.INT8:
        return count + SCALE_BYTES
    return math.ceil(count / 2) + SCALE_BYTES + DIM_BYTES * rank


def tensor_bytes(t: QuantizedTensor) -> int:
    return payload_bytes(t.mode, t.count, len(t.shape))


def quantized_bytes(q: QuantizedUpdate) -> int:
    return sum(tensor_bytes(t) for t in q.tensors)


def layout_bytes(layout: TensorLayout, mode: QuantMode) -> int:
    """quantized_bytes for an update with this layout, computed from shapes alone."""
    return sum(payload_bytes(mode, n, len(shape)) for n, shape in zip(layout.counts(), layout.shapes))


def fp32_bytes(layout: TensorLayout) -> int:
    return 4 * layout.size
