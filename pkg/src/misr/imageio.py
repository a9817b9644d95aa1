"""Image files and run manifests.

Two image formats are supported: grayscale or RGB PNG (8 or 16 bit) and a
raw little-endian float32 format with a 16-byte header
``b"MSRF", width:u32, height:u32, reserved:u32``. Intensities are handled as
floats in [0, 1]; quantization happens only when writing PNG.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ImageIOError
from .grid import ImageGrid
from .interp import bilinear_upsample

RAW_MAGIC = b"MSRF"
_HEADER = struct.Struct("<4sIII")

__all__ = [
    "read_image",
    "read_color",
    "write_image",
    "write_color",
    "read_manifest",
    "write_manifest",
    "rgb_to_ycbcr",
    "ycbcr_to_rgb",
    "upsample_chroma",
]


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """Full-range BT.601 YCbCr of an RGB array in [0, 1]."""
    m = np.array([[0.299, 0.587, 0.114],
                  [-0.168736, -0.331264, 0.5],
                  [0.5, -0.418688, -0.081312]])
    out = rgb @ m.T
    out[..., 1:] += 0.5
    return out


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 0.5, ycc[..., 2] - 0.5
    return np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb], axis=-1)


def _png_to_float(img: Image.Image) -> np.ndarray:
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        a = np.asarray(img, dtype=np.float64)
        return a / 65535.0
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    if img.mode in ("RGB", "RGBA", "P", "LA"):
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    raise ImageIOError(f"unsupported PNG mode {img.mode}")


def _read_raw(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ImageIOError(f"{path}: truncated header")
    magic, w, h, _ = _HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ImageIOError(f"{path}: not a raw float image (bad magic)")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if body.size != w * h:
        raise ImageIOError(f"{path}: expected {w}x{h} samples, found {body.size}")
    return body.astype(np.float64).reshape(h, w)


def read_color(path) -> np.ndarray:
    """Read an image as float array: ``(h, w)`` for gray, ``(h, w, 3)`` for RGB."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".raw":
            return _read_raw(path)
        with Image.open(path) as img:
            img.load()
            return _png_to_float(img)
    except ImageIOError:
        raise
    except (OSError, ValueError) as e:
        raise ImageIOError(f"cannot read {path}: {e}") from e


def read_image(path) -> ImageGrid:
    """Read an image as luminance in [0, 1]; RGB is converted to BT.601 luma."""
    a = read_color(path)
    if a.ndim == 3:
        a = rgb_to_ycbcr(a)[..., 0]
    return ImageGrid.from_array(a)


def _atomic_write(path: Path, writer):
    tmp = path.with_name(path.name + ".part")
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_image(path, image, bit_depth: int = 8):
    """Write ``image`` (ImageGrid or 2D array) as PNG or raw float32 by suffix."""
    path = Path(path)
    a = image.to_array() if isinstance(image, ImageGrid) else np.asarray(image, dtype=np.float64)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix.lower() == ".raw":
            h, w = a.shape
            payload = _HEADER.pack(RAW_MAGIC, w, h, 0) + a.astype("<f4").tobytes()
            _atomic_write(path, lambda p: p.write_bytes(payload))
        elif path.suffix.lower() == ".png":
            _atomic_write(path, lambda p: _png(a, bit_depth).save(p, format="PNG"))
        else:
            raise ConfigurationError(f"unknown image format for {path} (use .png or .raw)")
    except OSError as e:
        raise ImageIOError(f"cannot write {path}: {e}") from e


def _png(a: np.ndarray, bit_depth: int) -> Image.Image:
    c = np.clip(a, 0.0, 1.0)
    if bit_depth == 16:
        q = np.round(c * 65535.0).astype(np.uint16)
        if q.ndim == 3:
            raise ConfigurationError("16-bit output supports grayscale only")
        return Image.fromarray(q)
    if bit_depth != 8:
        raise ConfigurationError(f"PNG bit depth must be 8 or 16, got {bit_depth}")
    return Image.fromarray(np.round(c * 255.0).astype(np.uint8))


def upsample_chroma(rgb_lr: np.ndarray, luma_sr: np.ndarray, scale: int, offset) -> np.ndarray:
    """Recombine a super-resolved luma plane with bilinearly upsampled chroma."""
    ycc = rgb_to_ycbcr(rgb_lr)
    cb = bilinear_upsample(ycc[..., 1], scale, offset)
    cr = bilinear_upsample(ycc[..., 2], scale, offset)
    return np.clip(ycbcr_to_rgb(np.stack([luma_sr, cb, cr], axis=-1)), 0.0, 1.0)


def write_color(path, rgb: np.ndarray):
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ConfigurationError("color output must be PNG")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, lambda p: _png(rgb, 8).save(p, format="PNG"))
    except OSError as e:
        raise ImageIOError(f"cannot write {path}: {e}") from e


def write_manifest(path, entries: dict):
    """Write ``key=value`` lines in the given key order."""
    lines = []
    for k, v in entries.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ConfigurationError(f"manifest entry {k!r} is not representable")
        lines.append(f"{k}={v}")
    text = "\n".join(lines) + "\n"
    path = Path(path)
    try:
        _atomic_write(path, lambda p: p.write_text(text))
    except OSError as e:
        raise ImageIOError(f"cannot write {path}: {e}") from e


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ImageIOError(f"cannot read manifest {path}: {e}") from e
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise ImageIOError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
