"""Binary containers: PUD1 arrays (datasets) and PUW1 named-tensor bundles (checkpoints).

Both are little-endian.  PUD1 holds a single ``(channels, height, width)`` array;
PUW1 holds an ordered mapping of float32 tensors.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DatasetIOError

PUD_MAGIC = b"PUD1"
PUW_MAGIC = b"PUW1"

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1, np.dtype("uint8"): 2}
_CODE_DTYPES = {code: dt.newbyteorder("<") for dt, code in _DTYPE_CODES.items()}


def encode_pud(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype.kind == "f":
        arr = arr.astype(np.float32)
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype(np.int32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"PUD1 stores 2-D or 3-D arrays, got shape {arr.shape}")
    channels, height, width = arr.shape
    code = _DTYPE_CODES[arr.dtype]
    header = PUD_MAGIC + struct.pack("<4I", width, height, channels, code)
    return header + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


def decode_pud(blob: bytes) -> np.ndarray:
    if len(blob) < 20 or blob[:4] != PUD_MAGIC:
        raise DatasetIOError("not a PUD1 container")
    width, height, channels, code = struct.unpack_from("<4I", blob, 4)
    if code not in _CODE_DTYPES:
        raise DatasetIOError(f"unknown PUD1 dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = width * height * channels
    if len(blob) != 20 + count * dtype.itemsize:
        raise DatasetIOError("PUD1 payload size does not match header")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=20)
    data = data.astype(dtype.newbyteorder("="), copy=True).reshape(channels, height, width)
    return data[0] if channels == 1 else data


def write_pud(path: str | Path, array: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_pud(array))
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def read_pud(path: str | Path) -> np.ndarray:
    """Read a PUD1 file; single-channel arrays come back 2-D."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc
    return decode_pud(blob)


def encode_puw(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [PUW_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_puw(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != PUW_MAGIC:
        raise DatasetIOError("not a PUW1 checkpoint")
    try:
        (count,) = struct.unpack_from("<I", blob, 4)
        pos = 8
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            out[name] = data.astype(np.float32).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise DatasetIOError(f"truncated PUW1 checkpoint: {exc}") from exc
    if pos != len(blob):
        raise DatasetIOError("trailing bytes after PUW1 tensors")
    return out


def write_puw(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_puw(tensors))
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def read_puw(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc
    return decode_puw(blob)
