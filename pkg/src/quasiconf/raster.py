"""Raster containers and file I/O.

Rasters are stored as 32-bit floats; anything statistical upstream promotes
to float64 before doing arithmetic.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

DHCM_MAGIC = b"DHCM"
DHCM_VERSION = 1
_DHCM_HEADER = struct.Struct("<4sHHII")


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, order="C", copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImageRGB:
    """Row-major (height, width, 3) reflectance in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3 or a.shape[2] != 3:
            raise FormatError(f"expected (H, W, 3) array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise FormatError("image contains non-finite values")
        object.__setattr__(self, "data", _frozen(a, np.float32))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def channel(self, i: int) -> np.ndarray:
        return self.data[:, :, i]

    def as_float64(self) -> np.ndarray:
        return self.data.astype(np.float64)


@dataclass(frozen=True)
class IntensityMap:
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise FormatError(f"expected 2-D array, got shape {a.shape}")
        object.__setattr__(self, "data", _frozen(a, np.float32))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FloatMap:
    """Channel-major (channels, height, width) float map."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[None]
        if a.ndim != 3 or a.shape[0] < 1:
            raise FormatError(f"expected (C, H, W) array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise FormatError("float map contains non-finite values")
        object.__setattr__(self, "data", _frozen(a, np.float32))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def intensity(img: ImageRGB) -> IntensityMap:
    # sorting first makes the sum independent of channel order
    rgb = np.sort(img.data.astype(np.float64), axis=2)
    return IntensityMap((rgb[:, :, 0] + rgb[:, :, 1] + rgb[:, :, 2]) / 3.0)


# ---------------------------------------------------------------- raster I/O

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header")
    return buf[start:pos], pos


def _decode_ppm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise FormatError(f"unsupported PNM variant {magic!r}; only binary P6 is read")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PPM header field {tok!r}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}; only 8-bit is read")
    pos += 1  # single whitespace byte before the raster
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise FormatError("truncated PPM raster")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def _decode_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGB", "L", "P"):
            im = im.convert("RGB")
        elif im.mode == "RGBA":
            im = im.convert("RGB")
        else:
            raise FormatError(f"unsupported PNG mode {im.mode}; only 8-bit is read")
        return np.asarray(im, dtype=np.uint8)


def load_image(path) -> ImageRGB:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:1] == b"P":
        raw = _decode_ppm(buf)
    elif buf[:8] == b"\x89PNG\r\n\x1a\n":
        raw = _decode_png(path)
    else:
        raise FormatError(f"{path}: not a PPM (P6) or PNG file")
    return ImageRGB(raw.astype(np.float32) / np.float32(255.0))


def to_uint8(img: ImageRGB) -> np.ndarray:
    return np.clip(np.rint(img.data.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: ImageRGB, path) -> None:
    """Write 8-bit PPM or PNG, chosen by file suffix."""
    path = Path(path)
    raw = to_uint8(img)
    if path.suffix.lower() in (".ppm", ".pnm"):
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        path.write_bytes(header + raw.tobytes())
    elif path.suffix.lower() == ".png":
        Image.fromarray(raw, mode="RGB").save(path, format="PNG", optimize=False)
    else:
        raise FormatError(f"cannot infer raster format from suffix {path.suffix!r}")


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------- DHCM

def encode_float_map(fmap: FloatMap) -> bytes:
    header = _DHCM_HEADER.pack(DHCM_MAGIC, DHCM_VERSION, fmap.channels, fmap.width, fmap.height)
    return header + fmap.data.astype("<f4").tobytes(order="C")


def decode_float_map(buf: bytes) -> FloatMap:
    if len(buf) < _DHCM_HEADER.size:
        raise FormatError("DHCM file shorter than its header")
    magic, version, channels, width, height = _DHCM_HEADER.unpack_from(buf)
    if magic != DHCM_MAGIC:
        raise FormatError(f"bad DHCM magic {magic!r}")
    if version != DHCM_VERSION:
        raise FormatError(f"unsupported DHCM version {version}")
    if channels < 1:
        raise FormatError("DHCM header declares zero channels")
    n = channels * width * height
    payload = buf[_DHCM_HEADER.size:]
    if len(payload) != 4 * n:
        raise FormatError(f"DHCM payload has {len(payload)} bytes, header implies {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, height, width)
    return FloatMap(data.astype(np.float32))


def save_float_map(fmap: FloatMap, path) -> None:
    Path(path).write_bytes(encode_float_map(fmap))


def load_float_map(path) -> FloatMap:
    return decode_float_map(Path(path).read_bytes())
