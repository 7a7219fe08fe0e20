"""Binary tensor container: the on-disk format for models and features.

Layout (all little-endian):

    magic   4 bytes  b"FXN1"
    version u16      currently 1
    kind    u8       0 = float model, 1 = int8 model, 2 = feature tensors
    meta    u32 length + UTF-8 JSON (sorted keys)
    count   u32      number of tensors
    per tensor:
        name    u16 length + UTF-8
        dtype   u8   0 = f32, 1 = i8, 2 = i32, 3 = f64
        ndim    u8, then ndim x u32 dims
        qspec   u8 flag; if 1: scale f64, zero_point i32, min f64, max f64
        data    raw bytes, C order

Writing is deterministic (insertion order, canonical JSON), so
save -> load -> save reproduces files byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"FXN1"
VERSION = 1

KIND_FLOAT_MODEL = 0
KIND_INT8_MODEL = 1
KIND_TENSORS = 2

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i1"), 2: np.dtype("<i4"), 3: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("int8"): 1,
                np.dtype("int32"): 2, np.dtype("float64"): 3}


class ContainerError(ValueError):
    """Raised on bad magic, version, or truncated data."""


def write_container(path, kind, metadata, tensors):
    """tensors: iterable of (name, ndarray, qspec-or-None) tuples."""
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HB", VERSION, kind))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        tensors = list(tensors)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr, qspec in tensors:
            arr = np.asarray(arr)
            if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray promotes 0-d
                arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise ContainerError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            if qspec is None:
                f.write(struct.pack("<B", 0))
            else:
                f.write(struct.pack("<B", 1))
                f.write(struct.pack("<d", qspec.scale))
                f.write(struct.pack("<i", qspec.zero_point))
                f.write(struct.pack("<dd", qspec.min_val, qspec.max_val))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ContainerError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path):
    """Returns (kind, metadata dict, tensors dict name -> (ndarray, qspec_dict|None))."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise ContainerError(f"{path}: bad magic (not a flexinet container)")
    version, kind = r.unpack("<HB")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (meta_len,) = r.unpack("<I")
    metadata = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dtype_code, ndim = r.unpack("<BB")
        if dtype_code not in _DTYPES:
            raise ContainerError(f"{path}: tensor {name!r} has unknown dtype {dtype_code}")
        shape = tuple(r.unpack("<I")[0] for _ in range(ndim))
        (has_q,) = r.unpack("<B")
        qspec = None
        if has_q:
            (scale,) = r.unpack("<d")
            (zp,) = r.unpack("<i")
            lo, hi = r.unpack("<dd")
            qspec = {"scale": scale, "zero_point": zp, "min_val": lo, "max_val": hi}
        dt = _DTYPES[dtype_code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
        tensors[name] = (arr, qspec)
    if r.pos != len(data):
        raise ContainerError(f"{path}: {len(data) - r.pos} trailing bytes")
    return kind, metadata, tensors


def write_features(path, feats: np.ndarray, clip_id: str):
    write_container(path, KIND_TENSORS, {"clip_id": clip_id},
                    [("features", feats.astype(np.float32), None)])


def read_features(path) -> np.ndarray:
    kind, _, tensors = read_container(path)
    if kind != KIND_TENSORS or "features" not in tensors:
        raise ContainerError(f"{path}: not a feature container")
    return tensors["features"][0]
