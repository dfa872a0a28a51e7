"""Binary PPM (P6) / PGM (P5) reading and writing, 8 bits per sample."""
from __future__ import annotations

import re

import numpy as np

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def _read(path, magic: bytes):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _HEADER.match(raw)
    if not m or m.group(1) != magic:
        raise OSError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise OSError(f"{path}: only 8-bit images are supported")
    channels = 3 if magic == b"P6" else 1
    body = np.frombuffer(raw, dtype=np.uint8, offset=m.end())
    if body.size < w * h * channels:
        raise OSError(f"{path}: truncated pixel data")
    return body[: w * h * channels].reshape(h, w, channels)


def read_ppm(path) -> np.ndarray:
    """(3, H, W) float32 image in [0, 1]."""
    return (_read(path, b"P6").transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_ppm(path, image) -> None:
    """Write a (3, H, W) image with values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.transpose(1, 2, 0).tobytes())


def read_pgm(path) -> np.ndarray:
    """(H, W) uint8 array."""
    return _read(path, b"P5")[..., 0].copy()


def write_pgm(path, labels) -> None:
    arr = np.asarray(labels)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM label values must fit in 0..255")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())
