"""Self-describing binary container: JSON metadata header + named array blobs.

Layout (all little-endian):
    bytes 0..7    magic b"RCNSIC01"
    bytes 8..15   uint64 header length L
    bytes 16..16+L  UTF-8 JSON: {"meta": {...}, "arrays": [{name, dtype, shape}]}
    remainder     raw array bytes, concatenated in listed order (C order)

Round trips are bit-exact. Used for model checkpoints (float64 blobs) and
dataset files (float32 image/response blobs, int64 split indices).
"""

import json
import struct

import numpy as np

MAGIC = b"RCNSIC01"

_ALLOWED_DTYPES = {"<f8", "<f4", "<i8"}


def save(path, meta: dict, arrays: dict):
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for blob {name!r}")
        arr = arr.astype(dt, copy=False)
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load(path):
    """Returns (meta, arrays dict). Raises ValueError on corrupt files."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a container file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: corrupt header: {exc}") from exc
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise ValueError(
                    f"{path}: blob {entry['name']!r} truncated "
                    f"(expected {nbytes} bytes, got {len(raw)})"
                )
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header["meta"], arrays
