"""Image decode/encode and the deterministic bilinear resize.

Payloads everywhere are float arrays of shape (height, width, channels)
with values in [0, 1].  PGM/PPM are parsed and written in-repo (both the
binary P5/P6 and ascii P2/P3 variants are readable); PNG goes through
Pillow.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidTarget, UnsupportedImageFormat

# ITU-R BT.601 luminance weights for RGB -> grayscale
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def read_pnm(data: bytes) -> np.ndarray:
    """Decode PGM (P2/P5) or PPM (P3/P6) bytes to float32 in [0, 1]."""
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnsupportedImageFormat("truncated PNM header")
        return data[start:pos]

    magic = next_token()
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise UnsupportedImageFormat(f"not a PGM/PPM file (magic {magic!r})")
    channels = 3 if magic in (b"P3", b"P6") else 1
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise UnsupportedImageFormat(f"bad PNM header: {exc}") from exc
    if width < 1 or height < 1 or not (0 < maxval < 65536):
        raise UnsupportedImageFormat("invalid PNM dimensions")
    count = width * height * channels

    try:
        if magic in (b"P5", b"P6"):
            pos += 1  # single whitespace after maxval
            dtype = np.dtype(">u2") if maxval > 255 else np.uint8
            raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        else:
            values = data[pos:].split()
            if len(values) < count:
                raise UnsupportedImageFormat("truncated ascii PNM data")
            raw = np.array([int(v) for v in values[:count]], dtype=np.uint32)
    except ValueError as exc:
        raise UnsupportedImageFormat(f"bad PNM data: {exc}") from exc
    img = raw.astype(np.float32).reshape(height, width, channels) / float(maxval)
    return img


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    """Write a float [0, 1] array as binary PGM (1 channel) or PPM (3)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise UnsupportedImageFormat(f"cannot write {c}-channel PNM")
    quant = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(quant.tobytes())


def decode_image(path: str | Path) -> np.ndarray:
    """Load an image file as float32 (height, width, channels) in [0, 1]."""
    path = Path(path)
    ext = path.suffix.lower().lstrip(".")
    data = path.read_bytes()
    if ext in ("pgm", "ppm"):
        return read_pnm(data)
    if ext == "png":
        with Image.open(io.BytesIO(data)) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float32)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
        return arr / 255.0
    raise UnsupportedImageFormat(f"unsupported extension {ext!r}")


def to_channels(img: np.ndarray, channels: int) -> np.ndarray:
    """Convert between 1- and 3-channel payloads (luminance / replication)."""
    if img.ndim == 2:
        img = img[:, :, None]
    have = img.shape[2]
    if have == channels:
        return img
    if have == 3 and channels == 1:
        gray = (img.astype(np.float64) @ _LUMA).astype(img.dtype)
        return gray[:, :, None]
    if have == 1 and channels == 3:
        return np.repeat(img, 3, axis=2)
    raise UnsupportedImageFormat(f"cannot convert {have} channels to {channels}")


def resize_bilinear(img: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Corner-aligned bilinear resize, deterministic and channel-wise.

    Sample coordinates map corners to corners (src = dst * (n_src-1) /
    (n_dst-1)); interpolation is a two-stage lerp, so a constant image
    stays exactly constant and a same-size resize is bit-identical.
    """
    if target_w < 1 or target_h < 1:
        raise InvalidTarget(f"target {target_w}x{target_h}")
    arr = np.asarray(img)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, _ = arr.shape
    if h < 1 or w < 1:
        raise InvalidTarget("source image is empty")
    if (h, w) == (target_h, target_w):
        out = arr.copy()
        return out[:, :, 0] if squeeze else out

    def coords(n_src: int, n_dst: int) -> np.ndarray:
        if n_dst == 1 or n_src == 1:
            return np.zeros(n_dst, dtype=np.float64)
        return np.arange(n_dst, dtype=np.float64) * ((n_src - 1) / (n_dst - 1))

    xs = coords(w, target_w)
    ys = coords(h, target_h)
    x0 = np.minimum(xs.astype(np.int64), w - 1)
    y0 = np.minimum(ys.astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]

    src = arr.astype(np.float64)
    rows = src[:, x0, :] + fx * (src[:, x1, :] - src[:, x0, :])
    out = rows[y0, :, :] + fy * (rows[y1, :, :] - rows[y0, :, :])
    out = out.astype(arr.dtype)
    return out[:, :, 0] if squeeze else out


def load_payload(path: str | Path, channels: int, target_w: int, target_h: int) -> np.ndarray:
    """Decode, channel-convert and resize a file to a model input payload."""
    img = to_channels(decode_image(path), channels)
    return resize_bilinear(img, target_w, target_h).astype(np.float32)
