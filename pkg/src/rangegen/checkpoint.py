"""Binary checkpoint format for named float buffers.

Layout (little-endian throughout): magic ``OLCK``, version u16, buffer
count u32, then per buffer: name length u16 + UTF-8 name, rank u8,
extents u32 each, float32 row-major payload.
"""

import struct

import numpy as np

from .errors import ConfigError

MAGIC = b"OLCK"
VERSION = 1


def write_checkpoint(path, buffers):
    """Write a dict of name -> ndarray (cast to float32) to `path`."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(buffers)))
        for name in sorted(buffers):
            arr = np.ascontiguousarray(buffers[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(arr.tobytes())


def read_checkpoint(path):
    """Read an OLCK file; returns dict of name -> float32 ndarray."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not an OLCK checkpoint")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported OLCK version {version}")
    off = 10
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out[name] = arr.copy()
    return out
