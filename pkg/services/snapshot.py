"""
State-table snapshot: little-endian binary file plus a JSON manifest beside it.

  header   b"FSTB", version u16, N u32, d u32, N x f64 weights,
           layout: tensor count u32, per tensor rank u32, dims u32...
  slot     tag u8 (0 empty, 1 dense, 2 fp16, 3 int8, 4 int4), tensor count u32,
           per tensor: rank u32, dims u32..., scale f64 (int8/int4 only), payload
  trailer  cached_sum, d x f64

Decoding reproduces the table bit-for-bit, cached_sum included.
"""
import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from services.aggregator import StateTable
from services.errors import FedSimError, SnapshotError
from services.numvec import TensorLayout
from services.quant import QuantizedTensor, QuantizedUpdate, QuantMode

logger = logging.getLogger(__name__)

MAGIC = b"FSTB"
VERSION = 2

TAG_EMPTY = 0
TAG_DENSE = 1
_MODE_TAGS = {QuantMode.FP16: 2, QuantMode.INT8: 3, QuantMode.INT4: 4}
_TAG_MODES = {tag: mode for mode, tag in _MODE_TAGS.items()}
_PAYLOAD_DTYPES = {QuantMode.FP16: "<f2", QuantMode.INT8: "<i1", QuantMode.INT4: "<u1"}


def _payload_len(mode: QuantMode, count: int) -> int:
    if mode is QuantMode.INT4:
        return math.ceil(count / 2)
    return count


def _write_shape(out: List[bytes], shape: Tuple[int, ...]) -> None:
    out.append(struct.pack("<I", len(shape)))
    out.append(struct.pack(f"<{len(shape)}I", *shape))


def encode_table(table: StateTable) -> bytes:
    out: List[bytes] = [MAGIC, struct.pack("<HII", VERSION, table.num_clients, table.dim)]
    out.append(table.weights.astype("<f8").tobytes())
    out.append(struct.pack("<I", table.layout.num_tensors))
    for shape in table.layout.shapes:
        _write_shape(out, shape)
    for slot in table.slots:
        if slot is None:
            out.append(struct.pack("<BI", TAG_EMPTY, 0))
        elif isinstance(slot, QuantizedUpdate):
            out.append(struct.pack("<BI", _MODE_TAGS[slot.mode], len(slot.tensors)))
            for t in slot.tensors:
                _write_shape(out, t.shape)
                if t.mode in (QuantMode.INT8, QuantMode.INT4):
                    out.append(struct.pack("<d", t.scale))
                out.append(np.ascontiguousarray(t.data).astype(_PAYLOAD_DTYPES[t.mode]).tobytes())
        else:
            parts = table.layout.split(slot)
            out.append(struct.pack("<BI", TAG_DENSE, len(parts)))
            for part in parts:
                _write_shape(out, part.shape)
                out.append(np.ascontiguousarray(part).astype("<f8").tobytes())
    out.append(table.cached_sum.astype("<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SnapshotError(f"snapshot truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).copy()


def _read_shape(reader: _Reader) -> Tuple[int, ...]:
    (rank,) = reader.unpack("<I")
    return tuple(reader.unpack(f"<{rank}I")) if rank else ()


def decode_table(data: bytes, mode: QuantMode) -> StateTable:
    mode = QuantMode(mode)
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise SnapshotError("not a state-table snapshot (bad magic)")
    version, N, d = reader.unpack("<HII")
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    weights = reader.array("<f8", N).astype(np.float64)
    (num_tensors,) = reader.unpack("<I")
    shapes = tuple(_read_shape(reader) for _ in range(num_tensors))
    try:
        layout = TensorLayout(shapes)
        if layout.size != d:
            raise SnapshotError(f"layout holds {layout.size} values, header says d={d}")
        table = StateTable(N, layout, mode, weights)
    except SnapshotError:
        raise
    except FedSimError as exc:
        raise SnapshotError(f"invalid snapshot: {exc}") from exc

    slots = []
    for client in range(N):
        tag, count = reader.unpack("<BI")
        if tag == TAG_EMPTY:
            slots.append(None)
            continue
        tensor_shapes = []
        if tag == TAG_DENSE:
            parts = []
            for _ in range(count):
                shape = _read_shape(reader)
                n = int(np.prod(shape, dtype=np.int64)) if shape else 1
                parts.append(reader.array("<f8", n).astype(np.float64))
                tensor_shapes.append(shape)
            slots.append(np.concatenate(parts) if parts else np.zeros(0))
        elif tag in _TAG_MODES:
            slot_mode = _TAG_MODES[tag]
            tensors = []
            for _ in range(count):
                shape = _read_shape(reader)
                n = int(np.prod(shape, dtype=np.int64)) if shape else 1
                scale = reader.unpack("<d")[0] if slot_mode in (QuantMode.INT8, QuantMode.INT4) else 1.0
                payload = reader.array(_PAYLOAD_DTYPES[slot_mode], _payload_len(slot_mode, n))
                if slot_mode is QuantMode.INT8:
                    payload = payload.astype(np.int8)
                elif slot_mode is QuantMode.FP16:
                    payload = payload.astype(np.float16)
                else:
                    payload = payload.astype(np.uint8)
                tensors.append(QuantizedTensor(slot_mode, payload, scale, shape))
                tensor_shapes.append(shape)
            slots.append(QuantizedUpdate(slot_mode, tuple(tensors)))
        else:
            raise SnapshotError(f"client {client}: unknown slot tag {tag}")
        if tuple(tensor_shapes) != layout.shapes:
            raise SnapshotError(f"client {client}: tensor shapes differ from the table layout")
    cached_sum = reader.array("<f8", d).astype(np.float64)
    if reader.pos != len(data):
        raise SnapshotError(f"{len(data) - reader.pos} trailing bytes after snapshot")

    for client, slot in enumerate(slots):
        if isinstance(slot, QuantizedUpdate) and slot.mode is not mode:
            raise SnapshotError(f"client {client}: {slot.mode.value} slot in a {mode.value} table")
        if isinstance(slot, np.ndarray) and mode is not QuantMode.FP32:
            raise SnapshotError(f"client {client}: dense slot in a {mode.value} table")
    table.slots = slots
    table.cached_sum = cached_sum
    return table


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_snapshot(table: StateTable, path, round_index: int, strategy: str, weighting: str) -> Dict[str, Any]:
    path = Path(path)
    manifest = {
        "round": int(round_index),
        "strategy": strategy,
        "weighting": weighting,
        "mode": table.mode.value,
        "N": table.num_clients,
        "d": table.dim,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_table(table))
    with manifest_path(path).open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    logger.info("Wrote state-table snapshot %s (round %d, %s)", path, round_index, table.mode.value)
    return manifest


def load_snapshot(path) -> Tuple[StateTable, Dict[str, Any]]:
    path = Path(path)
    try:
        with manifest_path(path).open("r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        data = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    try:
        mode = QuantMode(manifest.get("mode", "fp32"))
    except ValueError as exc:
        raise SnapshotError(f"manifest names unknown mode {manifest.get('mode')!r}") from exc
    table = decode_table(data, mode)
    if table.num_clients != manifest.get("N") or table.dim != manifest.get("d"):
        raise SnapshotError("manifest N/d disagree with snapshot header")
    return table, manifest
