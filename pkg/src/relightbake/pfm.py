"""Portable float map (PFM) reader/writer.

Layout: ``PF`` (rgb) or ``Pf`` (gray) line, ``W H`` line, scale line whose
sign selects endianness (negative = little endian), then float32 rows stored
bottom to top. Arrays in memory are top row first.
"""
from __future__ import annotations

import os

import numpy as np


def write_pfm(path, image: np.ndarray, scale: float = 1.0) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 3:
        tag = b"PF"
    elif image.ndim == 2 or (image.ndim == 3 and image.shape[2] == 1):
        tag = b"Pf"
        image = image.reshape(image.shape[0], image.shape[1])
    else:
        raise ValueError(f"PFM needs (H,W), (H,W,1) or (H,W,3), got {image.shape}")
    h, w = image.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + f"{-abs(scale):g}\n".encode()
    data = np.flipud(image).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(data)


def _readline(f) -> bytes:
    line = f.readline()
    if not line:
        raise ValueError("truncated PFM header")
    return line.rstrip(b"\r\n")


def read_pfm(path) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        tag = _readline(f)
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file (tag {tag!r})")
        dims = _readline(f).split()
        while len(dims) < 2:
            dims += _readline(f).split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(_readline(f))
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        data = np.frombuffer(f.read(4 * count), dtype=dtype)
    if data.size != count:
        raise ValueError(f"{path}: expected {count} floats, found {data.size}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)
