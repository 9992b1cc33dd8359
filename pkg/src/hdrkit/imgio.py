"""Image containers and codecs: PPM (LDR), Radiance RGBE and PFM (HDR),
plus bilinear resizing.

Byte layouts, the RGBE mantissa convention and the reader limits are
documented in docs/FORMATS.md and locked by golden fixtures under
tests/fixtures/.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError

# Readers refuse headers claiming more pixels than this, so a fuzzed header
# cannot make us allocate gigabytes.
_MAX_PIXELS = 1 << 26

_WHITESPACE = b" \t\r\n\x0b\x0c"


@dataclass
class LdrImage:
    """Display-referred image: H x W x 3 float32 components in [0, 1]."""

    pixels: np.ndarray
    source_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DomainError(f"LdrImage needs HxWx3 pixels, got shape {px.shape}")
        if px.dtype != np.float32:
            px = px.astype(np.float32)
        if not np.all(np.isfinite(px)):
            raise DomainError("LdrImage components must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DomainError(
                f"LdrImage components must lie in [0, 1], got range "
                f"[{px.min()}, {px.max()}]")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class HdrImage:
    """Scene-referred image: H x W x 3 non-negative finite linear radiance."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DomainError(f"HdrImage needs HxWx3 pixels, got shape {px.shape}")
        if px.dtype != np.float32:
            px = px.astype(np.float32)
        if not np.all(np.isfinite(px)):
            raise DomainError("HdrImage components must be finite")
        if px.min() < 0.0:
            raise DomainError(f"HdrImage components must be non-negative, min {px.min()}")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


# ---------------------------------------------------------------------------
# header tokenizing


def _next_token(data: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next whitespace-delimited token, skipping '#' comment lines.

    Returns (token, token_start_offset, offset_past_token).
    """
    n = len(data)
    while pos < n:
        c = data[pos]
        if c in _WHITESPACE:
            pos += 1
        elif c == 0x23:  # '#'
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("unexpected end of header", offset=pos)
    start = pos
    while pos < n and data[pos] not in _WHITESPACE:
        pos += 1
    return data[start:pos], start, pos


def _int_token(data: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, start, pos = _next_token(data, pos)
    try:
        value = int(tok)
    except ValueError:
        raise FormatError(f"bad {what} {tok!r}", offset=start) from None
    return value, pos


def _check_dims(width: int, height: int, offset: int) -> None:
    if width < 1 or height < 1:
        raise FormatError(f"non-positive image extent {width}x{height}", offset=offset)
    if width * height > _MAX_PIXELS:
        raise FormatError(f"implausible image extent {width}x{height}", offset=offset)


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)


def read_ppm(data: bytes) -> LdrImage:
    """Parse a binary P6 PPM; byte v maps to component v/255."""
    if not data.startswith(b"P6"):
        raise FormatError("not a binary PPM (magic 'P6' missing)", offset=0)
    pos = 2
    width, pos = _int_token(data, pos, "width")
    dim_off = pos
    height, pos = _int_token(data, pos, "height")
    _check_dims(width, height, dim_off)
    maxval_tok, maxval_off, pos = _next_token(data, pos)
    if maxval_tok != b"255":
        raise FormatError(f"unsupported maxval {maxval_tok!r}, need 255", offset=maxval_off)
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError("missing whitespace after maxval", offset=pos)
    pos += 1
    need = width * height * 3
    if len(data) - pos < need:
        raise FormatError(
            f"truncated pixel payload: need {need} bytes, have {len(data) - pos}",
            offset=len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    pixels = raw.reshape(height, width, 3).astype(np.float32) / np.float32(255.0)
    return LdrImage(pixels)


def write_ppm(image: LdrImage) -> bytes:
    header = b"P6\n%d %d\n255\n" % (image.width, image.height)
    quantized = np.round(image.pixels * 255.0).astype(np.uint8)
    return header + quantized.tobytes()


# ---------------------------------------------------------------------------
# Radiance RGBE (.hdr)
#
# Mantissa convention: component/256. A record (r, g, b, e) with e > 0
# decodes to component * 2^(e-128) / 256; e == 0 decodes to black. The
# encoder is the exact inverse up to mantissa flooring.

_RESOLUTION_RE = re.compile(rb"-Y (\d+) \+X (\d+)\s*")
_RLE_MIN_WIDTH = 8
_RLE_MAX_WIDTH = 32767
_MIN_RUN = 4


def _decode_rgbe_records(rgbe: np.ndarray) -> np.ndarray:
    e = rgbe[..., 3].astype(np.int64)
    scale = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return (rgbe[..., :3].astype(np.float64) * scale[..., None]).astype(np.float32)


def _encode_rgbe_records(pixels: np.ndarray) -> np.ndarray:
    px = pixels.astype(np.float64)
    m = px.max(axis=-1)
    mant, expo = np.frexp(m)
    valid = m >= 1e-38
    e_byte = np.where(valid, expo + 128, 0)
    if np.any(e_byte > 255):
        raise DomainError("radiance too large for the RGBE shared exponent")
    scale = np.where(valid, np.ldexp(256.0, -expo), 0.0)
    out = np.empty(px.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = np.floor(px * scale[..., None]).astype(np.uint8)
    out[..., 3] = e_byte.astype(np.uint8)
    return out


def _rle_decode_plane(data: bytes, pos: int, width: int) -> tuple[np.ndarray, int]:
    plane = np.empty(width, dtype=np.uint8)
    x = 0
    n = len(data)
    while x < width:
        if pos >= n:
            raise FormatError("truncated RLE stream", offset=pos)
        code = data[pos]
        pos += 1
        if code > 128:
            run = code - 128
            if x + run > width:
                raise FormatError("RLE run overrun", offset=pos - 1)
            if pos >= n:
                raise FormatError("truncated RLE run value", offset=pos)
            plane[x:x + run] = data[pos]
            pos += 1
            x += run
        else:
            if code == 0:
                raise FormatError("zero-length RLE literal", offset=pos - 1)
            if x + code > width:
                raise FormatError("RLE run overrun", offset=pos - 1)
            if pos + code > n:
                raise FormatError("truncated RLE literal", offset=n)
            plane[x:x + code] = np.frombuffer(data, dtype=np.uint8, count=code, offset=pos)
            pos += code
            x += code
    return plane, pos


def _rle_encode_plane(plane: np.ndarray) -> bytes:
    """Adaptive RLE for one component plane: runs of >= 4 equal bytes become
    (128+len, value) codes, everything between becomes literal spans."""
    buf = plane.tobytes()
    width = len(buf)
    out = bytearray()
    i = 0
    while i < width:
        beg = i
        run = 0
        while beg < width:
            run = 1
            while run < 127 and beg + run < width and buf[beg + run] == buf[beg]:
                run += 1
            if run >= _MIN_RUN:
                break
            beg += run
        j = i
        while j < beg:
            n = min(128, beg - j)
            out.append(n)
            out.extend(buf[j:j + n])
            j += n
        if beg < width:
            out.append(128 + run)
            out.append(buf[beg])
            i = beg + run
        else:
            i = beg
    return bytes(out)


def read_rgbe(data: bytes) -> HdrImage:
    """Parse a Radiance .hdr file (flat or adaptive-RLE scanlines)."""
    if not (data.startswith(b"#?RADIANCE") or data.startswith(b"#?RGBE")):
        raise FormatError("missing Radiance signature", offset=0)
    pos = data.find(b"\n")
    if pos < 0:
        raise FormatError("unterminated signature line", offset=len(data))
    pos += 1
    format_seen = False
    width = height = 0
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("header ends before a resolution line", offset=len(data))
        line = data[pos:end]
        m = _RESOLUTION_RE.fullmatch(line)
        if m:
            if not format_seen:
                raise FormatError("missing FORMAT=32-bit_rle_rgbe line", offset=pos)
            height, width = int(m.group(1)), int(m.group(2))
            _check_dims(width, height, pos)
            pos = end + 1
            break
        if line[:1] in (b"-", b"+"):
            raise FormatError(f"unsupported resolution orientation {line!r}", offset=pos)
        if line.startswith(b"FORMAT="):
            if line.rstrip() != b"FORMAT=32-bit_rle_rgbe":
                raise FormatError(f"unsupported format {line!r}", offset=pos)
            format_seen = True
        pos = end + 1

    rgbe = np.empty((height, width, 4), dtype=np.uint8)
    for y in range(height):
        is_rle = (
            _RLE_MIN_WIDTH <= width <= _RLE_MAX_WIDTH
            and pos + 4 <= len(data)
            and data[pos] == 2 and data[pos + 1] == 2
            and (data[pos + 2] << 8) | data[pos + 3] == width
        )
        if is_rle:
            pos += 4
            for c in range(4):
                plane, pos = _rle_decode_plane(data, pos, width)
                rgbe[y, :, c] = plane
        else:
            need = width * 4
            if len(data) - pos < need:
                raise FormatError(
                    f"truncated scanline {y}: need {need} bytes", offset=len(data))
            rgbe[y] = np.frombuffer(
                data, dtype=np.uint8, count=need, offset=pos).reshape(width, 4)
            pos += need
    return HdrImage(_decode_rgbe_records(rgbe))


def write_rgbe(image: HdrImage) -> bytes:
    """Encode to Radiance .hdr; adaptive RLE for widths 8..32767, flat otherwise."""
    rgbe = _encode_rgbe_records(image.pixels)
    out = bytearray()
    out += b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n"
    out += b"-Y %d +X %d\n" % (image.height, image.width)
    if _RLE_MIN_WIDTH <= image.width <= _RLE_MAX_WIDTH:
        for y in range(image.height):
            out += bytes((2, 2, image.width >> 8, image.width & 0xFF))
            for c in range(4):
                out += _rle_encode_plane(rgbe[y, :, c])
    else:
        out += rgbe.tobytes()
    return bytes(out)


# ---------------------------------------------------------------------------
# PFM (lossless float32 interchange)


def read_pfm(data: bytes) -> HdrImage:
    """Parse a color PFM; the scale line's sign selects payload endianness
    (its magnitude is ignored), rows are stored bottom-up."""
    magic, magic_off, pos = _next_token(data, 0)
    if magic == b"Pf":
        raise FormatError("grayscale PFM (Pf) is unsupported; need color PF", offset=magic_off)
    if magic != b"PF":
        raise FormatError("not a PFM (magic 'PF' missing)", offset=magic_off)
    width, pos = _int_token(data, pos, "width")
    dim_off = pos
    height, pos = _int_token(data, pos, "height")
    _check_dims(width, height, dim_off)
    scale_tok, scale_off, pos = _next_token(data, pos)
    try:
        scale = float(scale_tok)
    except ValueError:
        raise FormatError(f"bad scale {scale_tok!r}", offset=scale_off) from None
    if scale == 0.0:
        raise FormatError("zero scale line", offset=scale_off)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError("missing whitespace after scale", offset=pos)
    pos += 1
    count = width * height * 3
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    if len(data) - pos < count * 4:
        raise FormatError(
            f"truncated payload: need {count * 4} bytes, have {len(data) - pos}",
            offset=len(data))
    flat = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    arr = flat.reshape(height, width, 3)[::-1].astype(np.float32)
    if np.any(np.isnan(arr)):
        raise FormatError("NaN in payload", offset=pos)
    if not np.all(np.isfinite(arr)):
        raise FormatError("non-finite value in payload", offset=pos)
    if arr.min() < 0.0:
        raise FormatError("negative radiance in payload", offset=pos)
    return HdrImage(arr)


def write_pfm(image: HdrImage) -> bytes:
    header = b"PF\n%d %d\n-1.0\n" % (image.width, image.height)
    return header + image.pixels[::-1].astype("<f4").tobytes()


# ---------------------------------------------------------------------------
# resizing


def resize_bilinear(image, new_w: int, new_h: int):
    """Bilinear resize with half-pixel-centered sampling and edge clamping.

    Accepts LdrImage or HdrImage and returns the same type.
    """
    if new_w < 1 or new_h < 1:
        raise ConfigError(f"resize target must be positive, got {new_w}x{new_h}")
    px = image.pixels.astype(np.float64)
    h, w = px.shape[:2]
    xs = np.clip((np.arange(new_w) + 0.5) * (w / new_w) - 0.5, 0, w - 1)
    ys = np.clip((np.arange(new_h) + 0.5) * (h / new_h) - 0.5, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    top = px[y0][:, x0] * (1 - fx) + px[y0][:, x1] * fx
    bottom = px[y1][:, x0] * (1 - fx) + px[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    if isinstance(image, LdrImage):
        return LdrImage(np.clip(out, 0.0, 1.0).astype(np.float32), image.source_depth)
    return HdrImage(np.maximum(out, 0.0).astype(np.float32))


# ---------------------------------------------------------------------------
# path-level convenience used by the CLI and trainer


def load_ldr(path) -> LdrImage:
    return read_ppm(Path(path).read_bytes())


def save_ldr(path, image: LdrImage) -> None:
    Path(path).write_bytes(write_ppm(image))


def load_hdr(path) -> HdrImage:
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return read_pfm(p.read_bytes())
    return read_rgbe(p.read_bytes())


def save_hdr(path, image: HdrImage) -> None:
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        p.write_bytes(write_pfm(image))
    else:
        p.write_bytes(write_rgbe(image))
