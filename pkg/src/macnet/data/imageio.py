"""Binary PPM (P6) codec.  Images are channels-first float arrays in [0, 1]."""

import re
from pathlib import Path

import numpy as np

from ..errors import ImageDecodeError, UnsupportedFormatError

_HEADER = re.compile(rb"\AP6(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def decode_ppm(blob, source="<bytes>"):
    if not blob.startswith(b"P6"):
        magic = blob[:2].decode("latin-1", "replace")
        if blob[:1] == b"P":
            raise UnsupportedFormatError(f"{source}: netpbm variant {magic!r} not supported (only binary P6)")
        raise UnsupportedFormatError(f"{source}: not a PPM file (magic {magic!r})")
    m = _HEADER.match(blob)
    if not m:
        raise ImageDecodeError(f"{source}: malformed P6 header")
    width, height, maxval = (int(g) for g in m.groups())
    if width < 1 or height < 1:
        raise ImageDecodeError(f"{source}: invalid extents {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{source}: only 8-bit samples (maxval 255) are supported, got {maxval}")
    body = blob[m.end():]
    need = width * height * 3
    if len(body) < need:
        raise ImageDecodeError(f"{source}: pixel data truncated ({len(body)} of {need} bytes)")
    pixels = np.frombuffer(body, dtype=np.uint8, count=need).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1)


def load_image(path, dtype=np.float32):
    """Decode ``path`` into a (3, H, W) array of 8-bit samples divided by 255."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"image not found: {path}") from None
    return decode_ppm(blob, str(path)).astype(dtype) / dtype(255.0)


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {arr.shape}")
    _, h, w = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes()


def save_image(path, image):
    Path(path).write_bytes(encode_ppm(image))
