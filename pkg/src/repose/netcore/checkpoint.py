"""Single-file tensor container.

Layout (all integers little-endian)::

    magic      8 bytes   b"REPOSECK"
    version    u16
    dtype      u8        1 = float32, 2 = float64
    meta_len   u32       followed by meta_len bytes of UTF-8 JSON
    count      u32       followed by ``count`` manifest entries:
        name_len u16, name (UTF-8), ndim u8, dims u32 * ndim, offset u64
    payload    raw little-endian tensors; offsets are relative to payload start
"""
import json
import struct

import numpy as np

MAGIC = b"REPOSECK"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


def save(path, arrays, metadata=None, dtype=np.float32):
    dtype = np.dtype(dtype)
    code = CODE_FOR[dtype]
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    manifest = bytearray()
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=DTYPE_CODES[code]))
        nb = name.encode("utf-8")
        manifest += struct.pack("<H", len(nb)) + nb
        manifest += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        manifest += struct.pack("<Q", offset)
        payloads.append(a.tobytes())
        offset += a.nbytes
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HB", VERSION, code))
        fh.write(struct.pack("<I", len(meta)) + meta)
        fh.write(struct.pack("<I", len(arrays)))
        fh.write(manifest)
        for p in payloads:
            fh.write(p)


def load(path):
    """Return ``(arrays, metadata)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a repose checkpoint (bad magic)")
    pos = 8
    version, code = struct.unpack_from("<HB", buf, pos)
    pos += 3
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if code not in DTYPE_CODES:
        raise CheckpointError(f"{path}: unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    metadata = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nl].decode("utf-8")
        pos += nl
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, shape, offset))
    arrays = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64))
        start = pos + offset
        if start + n * dtype.itemsize > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(buf, dtype=dtype, count=n, offset=start).reshape(shape).copy()
    return arrays, metadata
