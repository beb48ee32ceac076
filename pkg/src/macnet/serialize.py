"""Binary container of named arrays, used by model checkpoints.

Layout (all integers little-endian)::

    magic  b"MACT"
    u32    format version
    u32    entry count
    u32    metadata byte length, then UTF-8 ``key = value`` lines
    entries:
        u16 name length, UTF-8 name
        u8  dtype code (1 = float32, 2 = float64)
        u8  rank, then rank x u32 extents
        raw little-endian values in row-major order
"""

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"MACT"
VERSION = 1
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def format_metadata(meta):
    lines = []
    for key, value in meta.items():
        if "\n" in str(value) or "=" in str(key):
            raise CheckpointError(f"metadata entry {key!r} cannot be encoded as a key = value line")
        lines.append(f"{key} = {value}")
    return "\n".join(lines)


def parse_metadata(text):
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def save_arrays(path, arrays, meta=None, dtype=None):
    """Write ``{name: array}`` to ``path``.

    Values are stored as float32 unless the array is float64 and ``dtype`` is
    left as None; pass ``dtype=np.float32`` to force the 32-bit layout.
    """
    meta_bytes = format_metadata(meta or {}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, len(arrays), len(meta_bytes)))
        fh.write(meta_bytes)
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            target = np.dtype(dtype) if dtype is not None else (
                np.dtype("float64") if arr.dtype == np.float64 else np.dtype("float32"))
            raw = np.ascontiguousarray(arr, dtype=target.newbyteorder("<"))
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _CODE_OF[target], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(raw.tobytes())


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    try:
        version, count, meta_len = struct.unpack_from("<III", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        pos = 16
        meta = parse_metadata(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dt = _CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: entry {name!r} truncated")
            arrays[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt tensor container ({exc})") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after {count} entries")
    return arrays, meta
