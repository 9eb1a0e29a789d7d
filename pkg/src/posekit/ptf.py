"""PTF tensor container: one-line JSON header + little-endian float32 payload."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_ptf(path, array: np.ndarray):
    """Write an array as a PTF file (row-major float32)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = json.dumps({"shape": list(arr.shape), "dtype": "f32",
                         "order": "row-major"}, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        fh.write(arr.tobytes())


def read_ptf(path) -> np.ndarray:
    """Read a PTF file back into a float32 array."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("dtype") != "f32" or header.get("order") != "row-major":
            raise ValueError(f"unsupported PTF header: {header}")
        shape = tuple(int(d) for d in header["shape"])
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"PTF payload truncated: {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def ptf_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
