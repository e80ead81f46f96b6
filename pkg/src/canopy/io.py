"""Versioned binary container for checkpoints and fitted baselines.

Layout (little endian)::

    b"CNPY" | u32 version | u32 n_sections
    per section: u32 len | name utf-8 | u64 payload bytes | payload
    payload:     u32 n_arrays, then per array
                 u32 len | name utf-8 | u8 dtype code | u32 ndim | u64 * ndim shape | row-major data

dtype codes: ``f`` float64, ``i`` int64, ``b`` uint8 (used for embedded text).
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CNPY"
VERSION = 1
_DTYPES = {"f": np.dtype("<f8"), "i": np.dtype("<i8"), "b": np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    pass


def text_array(s):
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def array_text(a):
    return bytes(np.asarray(a, dtype=np.uint8)).decode("utf-8")


def _name(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _encode_array(name, arr):
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8")
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype("<i8")
    elif arr.dtype.kind == "b":
        arr = arr.astype("<i8")
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
    head = _name(name) + struct.pack("<BI", ord(code), arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes(order="C")


def dumps(sections):
    """Serialise ``{section: {array name: array}}`` (insertion order kept)."""
    out = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for sec, arrays in sections.items():
        payload = struct.pack("<I", len(arrays)) + b"".join(
            _encode_array(k, v) for k, v in arrays.items())
        out.append(_name(sec) + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ContainerError("truncated container")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (n,) = self.unpack("<I")
        return bytes(self.take(n)).decode("utf-8")


def loads(buf):
    r = _Reader(buf)
    if bytes(r.take(4)) != MAGIC:
        raise ContainerError("not a CNPY container (bad magic)")
    version, n_sec = r.unpack("<II")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    sections = {}
    for _ in range(n_sec):
        sec = r.name()
        (size,) = r.unpack("<Q")
        end = r.pos + size
        (n_arr,) = r.unpack("<I")
        arrays = {}
        for _ in range(n_arr):
            name = r.name()
            code, ndim = r.unpack("<BI")
            dtype = _DTYPES.get(chr(code))
            if dtype is None:
                raise ContainerError(f"unknown dtype code {code}")
            shape = r.unpack(f"<{ndim}Q") if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype)
            arrays[name] = data.reshape(shape).copy()
        if r.pos != end:
            raise ContainerError(f"section {sec!r} length mismatch")
        sections[sec] = arrays
    if r.pos != len(r.buf):
        raise ContainerError("trailing bytes after last section")
    return sections


def save(path, sections):
    Path(path).write_bytes(dumps(sections))


def load(path):
    return loads(Path(path).read_bytes())
