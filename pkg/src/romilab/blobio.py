"""Shared on-disk container: JSON header + little-endian float32 payload.

Layout: 4-byte little-endian uint32 header length, UTF-8 JSON header, then the
concatenated float32 arrays. The header carries whatever metadata the caller
needs plus the shapes of the payload arrays under "array_shapes" so the reader
can slice the flat payload back apart.
"""

from __future__ import annotations

import json
import struct

import numpy as np


def write_blob(path, header: dict, arrays: list[np.ndarray]) -> None:
    header = dict(header)
    header["array_shapes"] = [list(np.asarray(a).shape) for a in arrays]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_blob(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        flat = np.frombuffer(fh.read(), dtype="<f4")
    arrays = []
    off = 0
    for shape in header["array_shapes"]:
        n = int(np.prod(shape)) if shape else 1
        arrays.append(flat[off : off + n].reshape(shape).copy())
        off += n
    return header, arrays
