"""Binary parameter checkpoints.

Layout: magic ``VTMV``, format version u32, then per-array records of
(name length u32, UTF-8 name, rank u32, extents u64[rank], payload
little-endian f64). All integers little-endian. Records run to EOF.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTMV"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised on corrupt checkpoints; message names the failing byte offset."""


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic at byte 0: {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointFormatError("truncated header at byte 4")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version} at byte 4")
    arrays: dict[str, np.ndarray] = {}
    off = 8
    n = len(buf)
    while off < n:
        if off + 4 > n:
            raise CheckpointFormatError(f"truncated record header at byte {off}")
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + name_len + 4 > n:
            raise CheckpointFormatError(f"truncated record name at byte {off}")
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + 8 * rank > n:
            raise CheckpointFormatError(f"truncated extents at byte {off}")
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        count = 1
        for s in shape:
            count *= s
        nbytes = count * 8
        if off + nbytes > n:
            raise CheckpointFormatError(f"truncated payload for {name!r} at byte {off}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
    return arrays
