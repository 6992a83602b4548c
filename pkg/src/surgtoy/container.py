"""Binary formats: single-tensor files and named-array checkpoints.

All integers are little-endian. Array payloads are row-major.

Tensor file (``.svt``)::

    magic      4 bytes  b"SGTV"
    version    u16      1
    dtype      u8       see DTYPE_CODES
    rank       u8
    extents    u32 * rank
    payload    prod(extents) * itemsize bytes

Checkpoint (``.sck``)::

    magic      4 bytes  b"SGCK"
    version    u16      1
    stage      u16 length + utf-8 bytes
    config     u32 length + utf-8 JSON (sorted keys, compact separators)
    count      u32      number of arrays
    then per array, sorted by name:
      name     u16 length + utf-8 bytes
      dtype    u8
      rank     u8
      extents  u32 * rank
      nbytes   u64
      payload  nbytes bytes
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"SGTV"
CKPT_MAGIC = b"SGCK"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<i4"): 4,
    np.dtype("u1"): 5,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


def _as_le(array) -> np.ndarray:
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    le = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if le not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return np.asarray(arr, dtype=le, order="C")


def _write_array_header(buf, arr: np.ndarray):
    buf.write(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("truncated file")
    return data


def _read_array_header(buf) -> tuple[np.dtype, tuple[int, ...]]:
    code, rank = struct.unpack("<BB", _read_exact(buf, 2))
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
    return CODE_DTYPES[code], tuple(shape)


def encode_tensor(array) -> bytes:
    arr = _as_le(array)
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<H", VERSION))
    _write_array_header(buf, arr)
    buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    dtype, shape = _read_array_header(buf)
    n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = _read_exact(buf, n)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _pack_str(buf, text: str, fmt: str):
    raw = text.encode("utf-8")
    buf.write(struct.pack(fmt, len(raw)))
    buf.write(raw)


def _unpack_str(buf, fmt: str) -> str:
    (n,) = struct.unpack(fmt, _read_exact(buf, struct.calcsize(fmt)))
    return _read_exact(buf, n).decode("utf-8")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class Checkpoint:
    stage: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<H", VERSION))
        _pack_str(buf, self.stage, "<H")
        _pack_str(buf, canonical_json(self.config), "<I")
        buf.write(struct.pack("<I", len(self.arrays)))
        for name in sorted(self.arrays):
            arr = _as_le(self.arrays[name])
            _pack_str(buf, name, "<H")
            _write_array_header(buf, arr)
            payload = arr.tobytes(order="C")
            buf.write(struct.pack("<Q", len(payload)))
            buf.write(payload)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        buf = io.BytesIO(data)
        if _read_exact(buf, 4) != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<H", _read_exact(buf, 2))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        stage = _unpack_str(buf, "<H")
        config = json.loads(_unpack_str(buf, "<I"))
        (count,) = struct.unpack("<I", _read_exact(buf, 4))
        arrays = {}
        for _ in range(count):
            name = _unpack_str(buf, "<H")
            dtype, shape = _read_array_header(buf)
            (nbytes,) = struct.unpack("<Q", _read_exact(buf, 8))
            payload = _read_exact(buf, nbytes)
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        if buf.read(1):
            raise FormatError("trailing bytes after checkpoint")
        return cls(stage=stage, arrays=arrays, config=config)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix``, with the prefix stripped."""
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def module_arrays(module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays: dict[str, np.ndarray], prefix: str = "", strict: bool = True):
    import torch

    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=strict)
    return module
