"""TRAW1 flat binary weight files.

Layout (all integers little-endian)::

    b"TRAW1"
    repeated until EOF:
        uint32  name length in bytes
        bytes   UTF-8 name
        uint32  rank
        uint64  extent  (rank times)
        float32 value   (product of extents times, C order)

Values are stored as float32, so a double-precision array round-trips only
up to float32 rounding; float32 arrays round-trip bit-exactly.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TRAW1"


class WeightFileError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise WeightFileError("not a TRAW1 file (bad magic)")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    end = len(blob)
    try:
        while pos < end:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > end:
                raise WeightFileError(f"truncated values for tensor {name!r}")
            values = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            if name in out:
                raise WeightFileError(f"duplicate tensor name {name!r}")
            out[name] = values.astype(np.float32)
    except struct.error as exc:
        raise WeightFileError(f"truncated record at byte {pos}") from exc
    return out


def save_weights(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    blob = dumps(tensors)
    fd, tmp = tempfile.mkstemp(prefix=".traw-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_weights(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
