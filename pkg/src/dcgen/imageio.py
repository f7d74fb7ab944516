"""Image file output for sampled grids and dataset dumps.

PPM (P6) is the native format: trivially deterministic, no dependencies.
PNG goes through Pillow when available.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, FormatError, InputError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[3, H, W] float in [-1, 1] -> [H, W, 3] uint8."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractViolation(f"expected [3, H, W] image, got {image.shape}")
    scaled = (np.clip(image, -1.0, 1.0) + 1.0) * 127.5
    return np.rint(scaled).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str, image: np.ndarray):
    pixels = to_uint8(np.asarray(image, dtype=np.float32))
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read P6 back to [3, H, W] float32 in [-1, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a P6 ppm")
    try:
        w, h = (int(x) for x in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise FormatError(f"{path}: malformed ppm header") from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    raster = parts[3]
    if len(raster) < w * h * 3:
        raise FormatError(f"{path}: truncated raster")
    pixels = np.frombuffer(raster[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return (pixels.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def write_png(path: str, image: np.ndarray):
    try:
        from PIL import Image
    except ImportError:
        raise InputError("png output needs Pillow; use .ppm instead") from None
    Image.fromarray(to_uint8(np.asarray(image, dtype=np.float32))).save(path, format="PNG")


def tile_images(images: np.ndarray, columns: int = 0) -> np.ndarray:
    """Pack [N, 3, H, W] into one [3, H*rows, W*cols] sheet (row-major)."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ContractViolation(f"expected [N, 3, H, W], got {images.shape}")
    n, _, h, w = images.shape
    cols = columns if columns > 0 else int(np.ceil(np.sqrt(n)))
    rows = (n + cols - 1) // cols
    sheet = np.full((3, rows * h, cols * w), -1.0, dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, cols)
        sheet[:, r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i]
    return sheet
