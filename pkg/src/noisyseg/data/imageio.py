"""Raster I/O for 8-bit images and label masks.

Two families are supported: binary portable pixmaps (``P5`` grey, ``P6``
RGB) and PNG.  Images load as ``C x H x W`` float64 in [0, 1]; saving
rounds ``value * 255``.  PNG chunk structure and CRCs are validated here so
errors carry a byte offset; pixel decoding is left to Pillow.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from noisyseg.errors import ImageParseError
from noisyseg.tensor import IGNORE, IGNORE_ON_DISK

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}

# fixed palette for inspection copies of masks: background black, IGNORE white
_PALETTE_BASE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


# -- PNM --------------------------------------------------------------------

def _pnm_header(data: bytes):
    """Parse ``P5``/``P6`` header; returns (channels, width, height, maxval, pixel offset)."""
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in (b"5", b"6"):
        raise ImageParseError("not a binary PGM/PPM file", 0)
    channels = 1 if data[1:2] == b"5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageParseError("malformed PNM header", pos)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageParseError("missing whitespace after PNM header", pos)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageParseError("PNM dimensions must be positive", pos)
    if maxval != 255:
        raise ImageParseError(f"only 8-bit PNM (maxval 255) is supported, got {maxval}", pos)
    return channels, width, height, maxval, pos + 1


def _read_pnm(data: bytes) -> np.ndarray:
    channels, width, height, _, off = _pnm_header(data)
    need = width * height * channels
    if len(data) - off < need:
        raise ImageParseError(f"truncated pixel data: expected {need} bytes", len(data))
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    return px.reshape(height, width, channels).transpose(2, 0, 1).copy()


def _write_pnm(pixels: np.ndarray) -> bytes:
    c, h, w = pixels.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.transpose(1, 2, 0).tobytes()


# -- PNG --------------------------------------------------------------------

def validate_png(data: bytes) -> None:
    """Walk PNG chunks, checking lengths and CRCs.  Raises :class:`ImageParseError`."""
    if data[:8] != PNG_MAGIC:
        raise ImageParseError("bad PNG signature", 0)
    pos = 8
    seen_end = False
    while pos < len(data):
        if pos + 8 > len(data):
            raise ImageParseError("truncated chunk header", pos)
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        ctype = data[pos + 4:pos + 8]
        body_end = pos + 8 + length
        if body_end + 4 > len(data):
            raise ImageParseError(f"truncated {ctype!r} chunk", pos)
        (crc,) = struct.unpack(">I", data[body_end:body_end + 4])
        if zlib.crc32(data[pos + 4:body_end]) & 0xFFFFFFFF != crc:
            raise ImageParseError(f"CRC mismatch in {ctype!r} chunk", pos)
        pos = body_end + 4
        if ctype == b"IEND":
            seen_end = True
            break
    if not seen_end:
        raise ImageParseError("missing IEND chunk", pos)


def _read_png(data: bytes) -> np.ndarray:
    validate_png(data)
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:  # pillow raises a zoo of types for corrupt streams
        raise ImageParseError(f"undecodable PNG stream: {exc}", 8) from None
    if img.mode == "P":
        # palette masks keep their indices
        return np.asarray(img)[None].copy()
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.copy()


def _write_png(pixels: np.ndarray, palette=None) -> bytes:
    c = pixels.shape[0]
    if c == 1:
        img = Image.fromarray(pixels[0], mode="L")
        if palette is not None:
            img = Image.fromarray(pixels[0], mode="P")
            img.putpalette(palette)
    else:
        img = Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


# -- public API ---------------------------------------------------------------

def read_pixels(path) -> np.ndarray:
    """Raw 8-bit pixels as ``C x H x W`` uint8."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] == PNG_MAGIC:
        return _read_png(data)
    if data[:1] == b"P":
        return _read_pnm(data)
    raise ImageParseError(f"unrecognised raster format in {path.name}", 0)


def write_pixels(path, pixels: np.ndarray, palette=None) -> None:
    path = Path(path)
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    if pixels.dtype != np.uint8 or pixels.shape[0] not in (1, 3):
        raise ValueError("expected uint8 pixels with 1 or 3 channels")
    if path.suffix.lower() in PNM_SUFFIXES:
        data = _write_pnm(pixels)
    else:
        data = _write_png(pixels, palette)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename so a failed save never leaves a partial file
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    tmp.replace(path)


def to_uint8(values) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Image file -> ``C x H x W`` float64 feature map scaled to [0, 1]."""
    return read_pixels(path).astype(np.float64) / 255.0


def save_image(path, fmap) -> None:
    """``C x H x W`` map in [0, 1] (or ``H x W``) -> 8-bit PNG/PNM."""
    write_pixels(path, to_uint8(fmap))


def save_mask(path, mask, palette: bool = False) -> None:
    """Label image -> 8-bit single-channel file; IGNORE is written as 255."""
    m = np.asarray(mask)
    if m.size and (m.max() > 254 or (m.min() < 0 and not np.all(m[m < 0] == IGNORE))):
        raise ValueError("mask codes must be in 0..254 or IGNORE")
    disk = np.where(m == IGNORE, IGNORE_ON_DISK, m).astype(np.uint8)
    write_pixels(path, disk[None], palette=mask_palette() if palette else None)


def load_mask(path) -> np.ndarray:
    """8-bit mask file -> ``H x W`` int64 labels with IGNORE restored."""
    px = read_pixels(path)
    if px.shape[0] != 1:
        raise ImageParseError("mask files must have a single channel", 0)
    m = px[0].astype(np.int64)
    m[m == IGNORE_ON_DISK] = IGNORE
    return m


def mask_palette() -> list[int]:
    pal = [0] * 768
    for i in range(255):
        r, g, b = _PALETTE_BASE[i % len(_PALETTE_BASE)] if i < len(_PALETTE_BASE) else (i, i, i)
        pal[3 * i:3 * i + 3] = [r, g, b]
    pal[3 * 255:] = [255, 255, 255]
    return pal


def save_map_grayscale(path, amap) -> None:
    """Attention map -> 8-bit grey image (``value * 255``, rounded, clipped to [0, 255])."""
    write_pixels(path, to_uint8(np.asarray(amap, dtype=np.float64))[None] if np.ndim(amap) == 2 else to_uint8(amap))


def save_map_raw(path, amap) -> None:
    """Lossless float64 export (numpy ``.npy``)."""
    np.save(Path(path), np.asarray(amap, dtype=np.float64), allow_pickle=False)


def load_map_raw(path) -> np.ndarray:
    return np.load(Path(path), allow_pickle=False)
