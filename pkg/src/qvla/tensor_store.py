"""Tensors, signed 4-bit packing and the ``.qtz`` container format.

Container layout (all integers little-endian)::

    offset 0   b"QTZ1"
    offset 4   u64 header length N
    offset 12  N bytes of UTF-8 JSON manifest, space-padded so that the
               payload starts on a 64-byte boundary
    12 + N     payload; every tensor buffer starts at a multiple of 64
               relative to the payload start, gaps are zero-filled

The manifest maps ``name -> {"dtype", "shape", "byte_offset", "byte_length"}``
with keys sorted, so identical tensor maps serialise to identical bytes. An
empty map is written as the 12-byte preamble with ``N = 0``.

Dtypes:

* ``F32``: IEEE-754 binary32, row-major, finite values only.
* ``PackedI4``: signed integers in ``[-7, 7]``, two per byte. Element ``2i``
  lives in the low nibble of byte ``i`` and element ``2i+1`` in the high
  nibble; each nibble stores ``value + 8``. A trailing odd element is padded
  with a high nibble of 8.
* ``U8``: opaque bytes, used for embedded JSON documents (``manifest.json``,
  ``spec.json``).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, CorruptionError, NumericError, RangeError

MAGIC = b"QTZ1"
ALIGNMENT = 64
PREAMBLE = len(MAGIC) + 8
DTYPES = ("F32", "PackedI4", "U8")
I4_MAX = 7
_I4_BIAS = 8


def _align(n: int) -> int:
    return -(-n // ALIGNMENT) * ALIGNMENT


def pack_i4(values) -> bytes:
    """Pack signed integers in ``[-7, 7]`` into biased nibbles.

    Raises:
        RangeError: if any value is out of range; the message names the index.
    """
    v = np.asarray(values).reshape(-1)
    if v.size and not np.issubdtype(v.dtype, np.integer):
        if not np.all(np.isfinite(v)) or not np.all(v == np.round(v)):
            bad = int(np.flatnonzero(~np.isfinite(v) | (v != np.round(v)))[0])
            raise RangeError(f"pack_i4: value at index {bad} is not an integer")
    v = v.astype(np.int64)
    out_of_range = (v < -I4_MAX) | (v > I4_MAX)
    if out_of_range.any():
        bad = int(np.flatnonzero(out_of_range)[0])
        raise RangeError(f"pack_i4: value {int(v[bad])} at index {bad} outside [-7, 7]")
    nib = (v + _I4_BIAS).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(_I4_BIAS))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_i4(buf: bytes, count: int) -> np.ndarray:
    """Inverse of :func:`pack_i4`; returns ``count`` int8 values.

    Raises:
        CorruptionError: on a short buffer or a zero nibble (which would
            decode to -8, a value the symmetric quantizer never emits).
    """
    need = (count + 1) // 2
    raw = np.frombuffer(buf, dtype=np.uint8, count=min(len(buf), need))
    if raw.size < need:
        raise CorruptionError(f"unpack_i4: need {need} bytes for {count} values, got {len(buf)}")
    nib = np.empty(2 * need, dtype=np.uint8)
    nib[0::2] = raw & 0x0F
    nib[1::2] = raw >> 4
    nib = nib[:count]
    zero = nib == 0
    if zero.any():
        bad = int(np.flatnonzero(zero)[0])
        raise CorruptionError(f"unpack_i4: nibble at index {bad} decodes to -8")
    return nib.astype(np.int8) - _I4_BIAS


def _expected_nbytes(dtype: str, shape: tuple[int, ...]) -> int:
    n = math.prod(shape)
    if dtype == "F32":
        return 4 * n
    if dtype == "PackedI4":
        return (n + 1) // 2
    return n


@dataclass(frozen=True)
class Tensor:
    """Named, immutable buffer with shape metadata."""

    name: str
    shape: tuple[int, ...]
    dtype: str
    data: bytes

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ConfigError("tensor name must be a non-empty string")
        if self.dtype not in DTYPES:
            raise ConfigError(f"{self.name}: unknown dtype {self.dtype!r}")
        shape = tuple(int(s) for s in self.shape)
        if any(s <= 0 for s in shape) and not (self.dtype == "U8" and shape == (0,)):
            raise ConfigError(f"{self.name}: shape {shape} must be positive")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", bytes(self.data))
        want = _expected_nbytes(self.dtype, shape)
        if len(self.data) != want:
            raise ConfigError(
                f"{self.name}: {self.dtype}{list(shape)} needs {want} bytes, got {len(self.data)}"
            )

    @classmethod
    def from_array(cls, name: str, array) -> "Tensor":
        a = np.ascontiguousarray(array, dtype="<f4")
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{name}: refusing to store non-finite F32 values")
        shape = a.shape if a.ndim else (1,)
        return cls(name, shape, "F32", a.tobytes())

    @classmethod
    def from_ints(cls, name: str, ints) -> "Tensor":
        a = np.asarray(ints)
        shape = a.shape if a.ndim else (1,)
        return cls(name, shape, "PackedI4", pack_i4(a))

    @classmethod
    def from_json(cls, name: str, obj) -> "Tensor":
        raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return cls(name, (len(raw),), "U8", raw)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def to_array(self) -> np.ndarray:
        """Decoded values: float32 for F32, int8 for PackedI4, uint8 for U8."""
        if self.dtype == "F32":
            return np.frombuffer(self.data, dtype="<f4").astype(np.float32).reshape(self.shape)
        if self.dtype == "PackedI4":
            return unpack_i4(self.data, self.numel).reshape(self.shape)
        return np.frombuffer(self.data, dtype=np.uint8).copy()

    def to_json(self):
        if self.dtype != "U8":
            raise ConfigError(f"{self.name}: not a U8 document tensor")
        return json.loads(self.data.decode("utf-8"))


def encode_container(tensors: Mapping[str, Tensor]) -> bytes:
    for key, t in tensors.items():
        if key != t.name:
            raise ConfigError(f"map key {key!r} does not match tensor name {t.name!r}")
    if not tensors:
        return MAGIC + struct.pack("<Q", 0)
    names = sorted(tensors)
    manifest = {}
    offset = 0
    for name in names:
        t = tensors[name]
        manifest[name] = {
            "byte_length": t.nbytes,
            "byte_offset": offset,
            "dtype": t.dtype,
            "shape": list(t.shape),
        }
        offset = _align(offset + t.nbytes)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header += b" " * (_align(PREAMBLE + len(header)) - PREAMBLE - len(header))
    payload = bytearray()
    for name in names:
        entry = manifest[name]
        payload.extend(b"\x00" * (entry["byte_offset"] - len(payload)))
        payload.extend(tensors[name].data)
    return MAGIC + struct.pack("<Q", len(header)) + header + bytes(payload)


def decode_container(blob: bytes) -> dict[str, Tensor]:
    if len(blob) < PREAMBLE or blob[:4] != MAGIC:
        raise CorruptionError("bad magic: not a QTZ1 container")
    (hlen,) = struct.unpack_from("<Q", blob, 4)
    if PREAMBLE + hlen > len(blob):
        raise CorruptionError(f"header length {hlen} exceeds file size {len(blob)}")
    if hlen == 0:
        if len(blob) != PREAMBLE:
            raise CorruptionError("trailing bytes after empty manifest")
        return {}
    try:
        manifest = json.loads(blob[PREAMBLE : PREAMBLE + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"malformed manifest JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise CorruptionError("manifest must be a JSON object")
    base = PREAMBLE + hlen
    spans = []
    out = {}
    for name, entry in manifest.items():
        try:
            dtype = entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["byte_offset"])
            length = int(entry["byte_length"])
        except (KeyError, TypeError, ValueError):
            raise CorruptionError(f"{name}: malformed manifest entry {entry!r}") from None
        if dtype not in DTYPES:
            raise CorruptionError(f"{name}: unknown dtype {dtype!r}")
        if off < 0 or length < 0 or base + off + length > len(blob):
            raise CorruptionError(f"{name}: byte range [{off}, {off + length}) truncated")
        if length != _expected_nbytes(dtype, shape):
            raise CorruptionError(f"{name}: byte_length {length} inconsistent with {dtype}{list(shape)}")
        spans.append((off, off + length, name))
        data = blob[base + off : base + off + length]
        if dtype == "F32" and not np.all(np.isfinite(np.frombuffer(data, dtype="<f4"))):
            raise CorruptionError(f"{name}: non-finite F32 payload")
        try:
            out[name] = Tensor(name, shape, dtype, data)
        except ConfigError as exc:
            raise CorruptionError(str(exc)) from None
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CorruptionError(f"overlapping byte ranges: {a!r} and {b!r}")
    return out


def write_container(tensors: Mapping[str, Tensor], path) -> None:
    blob = encode_container(tensors)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_container(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())
