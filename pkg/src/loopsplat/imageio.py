"""PPM (P6, 8-bit) and PFM (grayscale/color, little endian) files."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) image in [0, 1] as binary PPM."""
    q = quantize(np.asarray(img, dtype=np.float64))
    h, w = q.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(q).tobytes())


def _tokens(f, n):
    out = []
    while len(out) < n:
        line = f.readline()
        if not line:
            raise ValueError("truncated PPM header")
        line = line.split(b"#", 1)[0]
        out.extend(line.split())
    return out


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM as float64 in [0, 1]."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _tokens(f, 4)
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w, h, maxval = int(w), int(h), int(maxval)
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, data: np.ndarray) -> None:
    """Write (H, W) or (H, W, 3) floats; rows stored bottom to top."""
    a = np.asarray(data, dtype="<f4")
    tag = "Pf" if a.ndim == 2 else "PF"
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(a)).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 1 if tag == b"Pf" else 3
        data = np.frombuffer(f.read(w * h * ch * 4), dtype=dtype)
    if data.size != w * h * ch:
        raise ValueError(f"{path}: truncated PFM data")
    shape = (h, w) if ch == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def read_image(path) -> np.ndarray:
    """PPM natively; anything else through Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
