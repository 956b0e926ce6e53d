"""Lossless conversion between byte sequences and gray-scale images.

One byte maps to one pixel, row-major, at a fixed column width. The final
row is zero-padded; ``payload_len`` records how many pixels are real bytes
so the padding is never mistaken for code. PNG I/O stores the payload
length in a ``<image>.len`` sidecar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InvalidArgumentError, UnsupportedFormatError

DEFAULT_WIDTH = 64

# Pixel-value scale for the [-1, 1] classifier domain: v = p / 127.5 - 1.
_NORM_SCALE = 127.5


@dataclass(frozen=True)
class GrayImage:
    """2-D array of byte-valued pixels plus the count of meaningful bytes."""

    pixels: np.ndarray  # uint8, shape (height, width)
    payload_len: int

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 2 or px.dtype != np.uint8:
            raise InvalidArgumentError("pixels must be a 2-D uint8 array")
        if not 0 < self.payload_len <= px.size:
            raise InvalidArgumentError("payload_len out of range")
        if px.size - self.payload_len >= px.shape[1]:
            raise InvalidArgumentError("padding must be confined to the final row")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.payload_len == other.payload_len and np.array_equal(
            self.pixels, other.pixels
        )


@dataclass(frozen=True)
class NormalizedImage:
    """Same shape as GrayImage, values in [-1, 1]."""

    values: np.ndarray  # float, shape (height, width)
    payload_len: int

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def bytes_to_image(data: bytes, width: int = DEFAULT_WIDTH) -> GrayImage:
    """Map each byte to one pixel, row-major; zero-pad the final row."""
    if width < 1:
        raise InvalidArgumentError("width must be >= 1")
    if len(data) == 0:
        raise InvalidArgumentError("data must be nonempty")
    height = math.ceil(len(data) / width)
    px = np.zeros(height * width, dtype=np.uint8)
    px[: len(data)] = np.frombuffer(bytes(data), dtype=np.uint8)
    return GrayImage(px.reshape(height, width), payload_len=len(data))


def image_to_bytes(img: GrayImage) -> bytes:
    """Inverse of bytes_to_image: the first payload_len pixels, as bytes."""
    return img.pixels.reshape(-1)[: img.payload_len].tobytes()


def normalize(img: GrayImage, dtype=np.float32) -> NormalizedImage:
    values = img.pixels.astype(dtype) / _NORM_SCALE - 1.0
    return NormalizedImage(values, img.payload_len)


def denormalize(n: NormalizedImage) -> GrayImage:
    px = np.rint((n.values + 1.0) * _NORM_SCALE)
    px = np.clip(px, 0, 255).astype(np.uint8)
    return GrayImage(px, n.payload_len)


def write_png(img: GrayImage, path) -> None:
    """8-bit single-channel PNG, no interlacing, plus a `.len` sidecar."""
    Image.fromarray(img.pixels, mode="L").save(str(path), format="PNG")
    with open(f"{path}.len", "w", encoding="utf-8") as fh:
        fh.write(f"{img.payload_len}\n")


def read_png(path) -> GrayImage:
    """Read an 8-bit gray-scale PNG written by write_png (or compatible).

    Without a `.len` sidecar the whole pixel area counts as payload.
    """
    try:
        with Image.open(str(path)) as im:
            if im.format != "PNG":
                raise UnsupportedFormatError(f"{path}: not a PNG file")
            if im.mode != "L":
                raise UnsupportedFormatError(
                    f"{path}: unsupported PNG mode {im.mode!r}; "
                    "need 8-bit single-channel gray-scale"
                )
            px = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a readable image") from exc
    payload_len = px.size
    try:
        with open(f"{path}.len", "r", encoding="utf-8") as fh:
            payload_len = int(fh.read().strip())
    except FileNotFoundError:
        pass
    return GrayImage(px, payload_len)
