"""Binary tensor container.

Layout: 8-byte magic ``NCTENSR1``, a little-endian uint32 header length,
a UTF-8 JSON header ``{"dtype": "f32"|"f64", "shape": [...], "order": "C"}``
and a little-endian C-order payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFile, InvalidArgument

MAGIC = b"NCTENSR1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


@dataclass
class TensorContainer:
    dtype: str
    shape: tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise InvalidArgument(f"unsupported dtype tag {self.dtype!r}")
        self.shape = tuple(int(s) for s in self.shape)
        expected = int(np.prod(self.shape, dtype=np.int64)) * _DTYPES[self.dtype].itemsize
        if len(self.payload) != expected:
            raise CorruptFile(
                f"payload has {len(self.payload)} bytes, shape {list(self.shape)} "
                f"with {self.dtype} needs {expected}"
            )

    @classmethod
    def from_array(cls, array) -> "TensorContainer":
        arr = np.asarray(array)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64)
        tag = _TAGS[arr.dtype]
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes(order="C")
        return cls(tag, arr.shape, data)

    def to_array(self) -> np.ndarray:
        arr = np.frombuffer(self.payload, dtype=_DTYPES[self.dtype]).reshape(self.shape)
        return arr.astype(_DTYPES[self.dtype].newbyteorder("="), copy=True)


def encode_tensor(container: TensorContainer) -> bytes:
    header = json.dumps(
        {"dtype": container.dtype, "shape": list(container.shape), "order": "C"},
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + container.payload


def decode_tensor(blob: bytes, source: str = "<bytes>") -> TensorContainer:
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{source}: bad magic")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise CorruptFile(f"{source}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        dtype, shape = header["dtype"], header["shape"]
    except (ValueError, KeyError) as exc:
        raise CorruptFile(f"{source}: unreadable header ({exc})") from exc
    if header.get("order", "C") != "C":
        raise CorruptFile(f"{source}: only C order is supported")
    try:
        return TensorContainer(dtype, shape, bytes(blob[12 + hlen :]))
    except CorruptFile as exc:
        raise CorruptFile(f"{source}: {exc}") from exc


def save_tensor(container: TensorContainer | np.ndarray, path) -> Path:
    if not isinstance(container, TensorContainer):
        container = TensorContainer.from_array(container)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensor(container))
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc}") from exc
    return path


def load_tensor(path) -> TensorContainer:
    path = Path(path)
    return decode_tensor(path.read_bytes(), source=str(path))


def load_array(path) -> np.ndarray:
    return load_tensor(path).to_array()
