"""PNG/PGM file I/O with deterministic bytes.

Images are float64 RGB in [0,1) on the u/256 grid (see codec docs); masks are
single-channel 8-bit PGM (P5) with damage classes 0..4.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .errors import InputError


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Snap floats to the u/256 pixel grid (round to nearest, clip)."""
    u = np.clip(np.rint(np.asarray(img) * 256.0), 0, 255).astype(np.uint8)
    return u.astype(np.float64) / 256.0


def image_to_bytes(img: np.ndarray) -> bytes:
    """(3,H,W) floats -> PNG bytes (RGB, 8-bit)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"expected (3,H,W) image, got {img.shape}")
    u = np.clip(np.rint(img * 256.0), 0, 255).astype(np.uint8)
    pil = Image.fromarray(u.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def save_image(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(image_to_bytes(img))


def load_image(path) -> np.ndarray:
    """PNG -> (3,H,W) float64 on the u/256 grid."""
    with Image.open(path) as pil:
        arr = np.asarray(pil.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 256.0


def save_mask(path, mask: np.ndarray) -> None:
    """(H,W) small-int classes -> binary PGM (P5, maxval 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"expected 2-d mask, got {mask.shape}")
    if mask.min() < 0 or mask.max() > 255:
        raise InputError("mask values must fit 8 bits")
    header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + mask.astype(np.uint8).tobytes())


def load_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise InputError(f"{path} is not a binary PGM (P5) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    width, height, maxval = (int(f) for f in fields)
    if maxval > 255:
        raise InputError("16-bit PGM masks are not supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.int64)
