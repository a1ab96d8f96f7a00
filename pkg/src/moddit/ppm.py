"""Binary PPM (P6) image files, written and parsed without image libraries.

The writer emits a canonical header so identical pixel data always yields
identical bytes.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def write_ppm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValidationError(f"write_ppm wants uint8 [H,W,3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValidationError(f"{path}: not a binary PPM (P6) file")
    # header = magic, width, height, maxval as whitespace-separated fields,
    # with optional '#' comment lines
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ValidationError(f"{path}: malformed PPM header")
    if maxval != 255:
        raise ValidationError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    body = data[pos : pos + need]
    if len(body) != need:
        raise ValidationError(f"{path}: payload holds {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 image to float32 in [0, 1]."""
    return img.astype(np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clip a float image to [0, 1] and quantize to bytes."""
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
